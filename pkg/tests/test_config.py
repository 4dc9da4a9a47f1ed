import configparser

import pytest

from stcnet.config import parse_config, parse_overrides
from stcnet.data import SynthSpec
from stcnet.errors import ConfigError
from stcnet.runtime import requested_threads, thread_limit
from stcnet.train import OptimConfig
from stcnet.transfer import TransferConfig


def _echo(cfg, tmp_path):
    ini = configparser.ConfigParser(interpolation=None)
    ini.optionxform = str
    ini.read(cfg.echo(tmp_path))
    return ini


def test_empty_file_echoes_every_default(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg.optim() == OptimConfig()
    assert cfg.synth() == SynthSpec()
    assert cfg.transfer() == TransferConfig()
    assert cfg.seed == 42 and cfg.ablation_axis is None
    ini = _echo(cfg, tmp_path / "run")
    assert set(ini.sections()) == {"arch", "optim", "data", "transfer", "ablation"}
    for section, values in cfg.sections.items():
        assert set(ini[section]) == set(values)
    assert ini["optim"]["lr"] == "0.1" and ini["arch"]["preset"] == "toy-stc-resnet"
    assert parse_config(tmp_path / "run" / "config.ini").sections == cfg.sections


def test_momentum_value():
    assert parse_config(text="[optim]\nmomentum = 0.9  # nesterov\n").optim().momentum == 0.9


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[optim]\nlr = 0.1\n")
    cfg = parse_config(path, parse_overrides(["--optim.lr", "0.01"]))
    assert cfg.optim().lr == 0.01
    assert _echo(cfg, tmp_path)["optim"]["lr"] == "0.01"


def test_parse_overrides_forms():
    assert parse_overrides(["--data.seed=3", "--optim.max-epochs", "5"]) == {
        "data": {"seed": "3"}, "optim": {"max_epochs": "5"}}
    with pytest.raises(ConfigError):
        parse_overrides(["--optim.lr"])


def test_unknown_key_names_section():
    with pytest.raises(ConfigError, match=r"'zzz'.*\[optim\]"):
        parse_config(text="[optim]\nzzz = 1\n")


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"\[model\]"):
        parse_config(text="[model]\nx = 1\n")


@pytest.mark.parametrize("text", ["[optim]\nlr = fast\n", "[optim]\nnesterov = maybe\n",
                                  "[data]\nframes = 8.5\n", "[arch]\nblocks = 1,x,1,1\n"])
def test_type_mismatch(text):
    with pytest.raises(ConfigError):
        parse_config(text=text)


def test_range_errors_surface():
    with pytest.raises(ConfigError, match="momentum"):
        parse_config(text="[optim]\nmomentum = 1.5\n")
    with pytest.raises(ConfigError, match="axis"):
        parse_config(text="[ablation]\naxis = colour\n")


def test_arch_preset_defaults_and_tuples():
    cfg = parse_config(text="[arch]\npreset = stc-resnext-101\nstem_kernel = 3x3x3\nstage_strides = 1x2,2x2,2x2,2x2\n")
    arch = cfg.arch()
    assert arch.cardinality == 32 and arch.stem_kernel == (3, 3, 3)
    assert arch.stage_strides == ((1, 2), (2, 2), (2, 2), (2, 2))
    assert parse_config(text="[optim]\ntarget_val_acc = none\n").optim().target_val_acc is None


def test_requested_threads():
    assert requested_threads({}) is None
    assert requested_threads({"STCNET_THREADS": "1"}) == 1
    for bad in ("0", "-2", "two"):
        with pytest.raises(ConfigError):
            requested_threads({"STCNET_THREADS": bad})


def test_thread_limit_context():
    with thread_limit(1) as n:
        assert n == 1
