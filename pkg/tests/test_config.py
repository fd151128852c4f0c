"""Config resolution: file parsing, env and --set overrides, precedence,
casting, and the canonical echo round trip."""

import pytest

from peadapt.config import (
    RunConfig,
    code_digest,
    env_overrides,
    parse_config_file,
    parse_set_pairs,
    resolve_config,
    schema,
)


class TestSchema:
    def test_every_section_key_has_a_type(self):
        table = schema()
        assert table["host.vision_dim"] is int
        assert table["train.lr_adapters"] is float
        assert table["train.jitter"] is bool
        assert table["adapter.cell_kind"] is str
        assert table["augment.mixup_alpha"] is float
        assert table["prompt.n_tokens"] is int

    def test_none_default_maps_to_str(self):
        assert schema()["prompt.description_file"] is str

    def test_extra_keys_present(self):
        table = schema()
        assert table["data.root"] is str
        assert table["run.seed"] is int
        assert table["run.preset"] is str


class TestFileParsing:
    def test_comments_and_blanks_skipped(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("# a comment\n\ntrain.epochs = 3\n  host.frames=4  \n")
        assert parse_config_file(f) == {"train.epochs": "3", "host.frames": "4"}

    def test_malformed_line_reports_line_number(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("train.epochs = 3\njust words\n")
        with pytest.raises(ValueError, match=r"run\.cfg:2"):
            parse_config_file(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_config_file(tmp_path / "nope.cfg")

    def test_set_pairs(self):
        assert parse_set_pairs(["a.b=1", "c.d = x "]) == {"a.b": "1", "c.d": "x"}
        with pytest.raises(ValueError, match="key=value"):
            parse_set_pairs(["train.epochs"])


class TestEnvOverrides:
    def test_section_split_on_first_underscore(self):
        env = {
            "PEADAPT_TRAIN_EPOCHS": "5",
            "PEADAPT_HOST_VISION_DIM": "32",
            "PEADAPT_RUN_SEED": "9",
            "HOME": "/root",
        }
        assert env_overrides(env) == {
            "train.epochs": "5",
            "host.vision_dim": "32",
            "run.seed": "9",
        }

    def test_malformed_name_rejected(self):
        with pytest.raises(ValueError, match="PEADAPT_EPOCHS"):
            env_overrides({"PEADAPT_EPOCHS": "5"})


class TestResolve:
    def test_defaults(self):
        cfg = resolve_config(env={})
        assert cfg.preset == "toy"
        assert cfg.host.vision_dim == 64
        assert cfg.train.lr_adapters == 2e-4
        assert cfg.seed == 0
        assert cfg.data_root is None
        assert cfg.out_dir == "runs/default"

    def test_unknown_key_with_hint(self):
        with pytest.raises(ValueError, match=r"did you mean train\.epochs"):
            resolve_config(set_pairs=["epochs=3"], env={})

    def test_unknown_key_without_hint(self):
        with pytest.raises(ValueError, match="unknown config key 'foo.bar'"):
            resolve_config(set_pairs=["foo.bar=1"], env={})

    def test_precedence_file_env_set(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("train.epochs = 5\ntrain.batch_size = 2\nhost.frames = 4\n")
        env = {"PEADAPT_TRAIN_EPOCHS": "7", "PEADAPT_TRAIN_SEED": "3"}
        cfg = resolve_config(
            config_file=f, set_pairs=["train.epochs=9"], env=env
        )
        assert cfg.train.epochs == 9          # --set beats env beats file
        assert cfg.train.seed == 3            # env beats default
        assert cfg.train.batch_size == 2      # file beats default
        assert cfg.host.frames == 4

    def test_full_preset_with_overrides(self):
        cfg = resolve_config(
            preset="full", set_pairs=["host.layers_vision=2"], env={}
        )
        assert cfg.host.vision_dim == 768
        assert cfg.host.context_length == 77
        assert cfg.host.layers_vision == 2
        assert cfg.preset == "full"

    def test_bad_preset(self):
        with pytest.raises(ValueError, match="toy or full"):
            resolve_config(set_pairs=["run.preset=huge"], env={})

    def test_bool_casting(self):
        for raw, want in [("true", True), ("ON", True), ("0", False), ("no", False)]:
            cfg = resolve_config(set_pairs=[f"train.jitter={raw}"], env={})
            assert cfg.train.jitter is want
        with pytest.raises(ValueError, match="train.jitter"):
            resolve_config(set_pairs=["train.jitter=maybe"], env={})

    def test_int_and_float_casting(self):
        cfg = resolve_config(set_pairs=["train.lr_adapters=2e-3"], env={})
        assert cfg.train.lr_adapters == 2e-3
        with pytest.raises(ValueError, match="host.frames"):
            resolve_config(set_pairs=["host.frames=eight"], env={})

    def test_none_literal_for_string_keys(self):
        cfg = resolve_config(set_pairs=["prompt.description_file=none"], env={})
        assert cfg.prompt.description_file is None

    def test_dataclass_validation_propagates(self):
        with pytest.raises(ValueError, match="image_size"):
            resolve_config(set_pairs=["host.image_size=50"], env={})

    def test_seed_flows_to_train_seed(self):
        cfg = resolve_config(seed=5, env={})
        assert cfg.seed == 5
        assert cfg.train.seed == 5

    def test_explicit_train_seed_wins(self):
        cfg = resolve_config(seed=5, set_pairs=["train.seed=9"], env={})
        assert cfg.seed == 5
        assert cfg.train.seed == 9


class TestEcho:
    def test_round_trip_is_identical(self, tmp_path):
        first = resolve_config(
            set_pairs=["train.epochs=3", "train.warmup_epochs=1",
                       "adapter.cell_kind=lstm", "augment.mixup_alpha=0.2"],
            env={},
        )
        echo = tmp_path / "echo.cfg"
        echo.write_text(first.to_text())
        second = resolve_config(config_file=echo, env={})
        assert second.to_text() == first.to_text()
        assert second.digest() == first.digest()

    def test_full_preset_round_trip(self, tmp_path):
        first = resolve_config(preset="full", env={})
        echo = tmp_path / "echo.cfg"
        echo.write_text(first.to_text())
        second = resolve_config(config_file=echo, env={})
        assert second.host == first.host
        assert second.digest() == first.digest()

    def test_digest_tracks_values(self):
        a = resolve_config(env={})
        b = resolve_config(set_pairs=["train.epochs=31"], env={})
        assert a.digest() != b.digest()
        assert a.digest() == resolve_config(env={}).digest()

    def test_echo_lists_every_schema_key(self):
        text = resolve_config(env={}).to_text()
        keys = {line.split(" = ")[0] for line in text.strip().splitlines()}
        assert keys == set(schema())


def test_code_digest_is_stable_hex():
    d = code_digest()
    assert d == code_digest()
    assert len(d) == 64
    int(d, 16)
