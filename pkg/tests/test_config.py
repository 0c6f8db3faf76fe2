"""Run configuration parsing, overrides and seed resolution."""

import pytest

from usad.config import DEFAULTS, SEED_ENV, ConfigError, RunConfig, parse_overrides, parse_text


class TestParse:
    def test_typed_values(self):
        values = parse_text("seed = 3\ndiffusion.T = 10  # short\nmodel.spatial_attn = off\ndiffusion.lr=1e-3\n")
        assert values == {"seed": 3, "diffusion.T": 10, "model.spatial_attn": False, "diffusion.lr": 1e-3}

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match=r"cfg:2: unknown key"):
            parse_text("seed = 1\nnope = 2\n", "cfg")

    @pytest.mark.parametrize("line", ["diffusion.T = ten", "model.spatial_attn = maybe", "seed = x", "seed"])
    def test_bad_values(self, line):
        with pytest.raises(ConfigError):
            parse_text(line)


class TestRunConfig:
    def test_seed_mandatory(self):
        with pytest.raises(ConfigError, match="seed is mandatory"):
            RunConfig({})

    def test_defaults(self):
        cfg = RunConfig({"seed": 0})
        assert cfg["diffusion.T"] == 50 and cfg.stages == ["diffusion", "pretrain", "finetune"]
        assert cfg.floats("loss.omega") == [0.33, 0.33, 0.34]
        assert cfg.ints("model.kernels") == [3, 5, 7]

    def test_text_round_trip(self):
        cfg = RunConfig({"seed": 5, "diffusion.lr": 0.1 + 0.2, "model.temporal_attn": False})
        back = RunConfig(parse_text(cfg.to_text()))
        assert back == cfg and back.to_text() == cfg.to_text()

    @pytest.mark.parametrize("kv", [{"stages": "finetune,oops"}, {"data.split": "0.5,0.5,0.5"},
                                    {"loss.omega": "1,0"}, {"model.kind": "rnn"}, {"finetune.mix": 1.0}])
    def test_validation(self, kv):
        with pytest.raises(ConfigError):
            RunConfig({"seed": 0, **kv})

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 1\ndiffusion.T = 20\n")
        cfg = RunConfig.load(path, {"diffusion.T": "30"}, env={})
        assert cfg["diffusion.T"] == 30 and cfg.seed == 1

    def test_env_seed_is_last_resort(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("diffusion.T = 20\n")
        assert RunConfig.load(path, env={SEED_ENV: "9"}).seed == 9
        path.write_text("seed = 4\n")
        assert RunConfig.load(path, env={SEED_ENV: "9"}).seed == 4
        assert RunConfig.load(path, {"seed": "7"}, env={SEED_ENV: "9"}).seed == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(tmp_path / "absent.cfg", env={})

    def test_section(self):
        assert set(RunConfig({"seed": 0}).section("synth")) == {"synth.M", "synth.balanced"}

    def test_every_default_key_round_trips(self):
        cfg = RunConfig({"seed": 0})
        assert set(parse_text(cfg.to_text())) == set(DEFAULTS)


class TestOverrides:
    def test_parse(self):
        assert parse_overrides(["a.b=1", " c = x=y "]) == {"a.b": "1", "c": "x=y"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_overrides(["novalue"])
