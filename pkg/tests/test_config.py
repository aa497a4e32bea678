from pathlib import Path

import pytest

from routefl.client import TrainHyper
from routefl.config import apply_axis, check_sweep, dump_config, load_config, loads_config, parse_override
from routefl.errors import ConfigError

CONFIGS = Path(__file__).parent.parent / "configs"

BASE = """\
name: tiny
task:
  kind: sequence
  vocab_size: 6
  num_clients: 4
  min_instances: 5
  max_instances: 8
model:
  input_dim: 3
  hidden_dim: 3
federation:
  rounds: 2
  clients_per_round: 2
"""


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert loads_config(dump_config(cfg)).to_dict() == cfg.to_dict()


def test_defaults_and_derived_values():
    cfg = loads_config(BASE)
    assert cfg.kind == "sequence" and cfg.variant == "flow" and cfg.seeds == [0]
    assert cfg.eval_clients == 4
    spec = cfg.model_spec()
    assert (spec.input_dim, spec.hidden_dim, spec.num_classes) == (3, 3, 6)
    assert cfg.train == TrainHyper.for_task("sequence")
    assert cfg.task_for_seed(7).seed == 7
    fed = cfg.federation_config(3)
    assert fed.seed == 3 and fed.eval_clients == 4


def test_classify_defaults_use_classification_hyper():
    cfg = loads_config(BASE.replace("kind: sequence", "kind: classify").replace("  vocab_size: 6\n", ""))
    assert cfg.train == TrainHyper.for_task("classify")
    assert cfg.model_spec().input_dim == cfg.task.input_dim


def test_data_seed_pins_the_federation():
    cfg = loads_config(BASE + "data_seed: 9\nseeds: [1, 2]\n")
    assert cfg.task_for_seed(1).seed == cfg.task_for_seed(2).seed == 9


@pytest.mark.parametrize(
    "extra,line",
    [
        ("colour: red\n", 14),
        ("train:\n  gamma: high\n", 15),
        ("train:\n  epochs: 3\n", 15),
        ("eval:\n  soft: 1\n", 15),
        ("variant: mixture\n", 14),
        ("seeds: [1, 1]\n", 14),
    ],
)
def test_bad_keys_report_their_line(extra, line):
    with pytest.raises(ConfigError) as err:
        loads_config(BASE + extra)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


@pytest.mark.parametrize(
    "extra",
    [
        "train:\n  tau: 0\n",
        "train:\n  lr_local: -1\n",
        "federation:\n  clients_per_round: 9\n",
        "federation:\n  failure_policy: retry\n",
        "eval:\n  clients: 5\n",
        "eval:\n  split: train\n",
        "model:\n  cell: lstm\n",
        "seeds: []\n",
        "name: a/b\n",
        "sweep:\n  axis: lambda\n  values: []\n",
        "sweep:\n  axis: width\n  values: [1]\n",
    ],
)
def test_invalid_values_fail(extra):
    # a repeated section replaces the earlier one
    with pytest.raises(ConfigError):
        loads_config(BASE + extra)


def test_missing_task_and_task_seed_fail():
    with pytest.raises(ConfigError):
        loads_config("name: x\n")
    with pytest.raises(ConfigError):
        loads_config(BASE.replace("  vocab_size: 6", "  seed: 3"))
    with pytest.raises(ConfigError):
        loads_config(BASE.replace("kind: sequence", "kind: images"))


def test_yaml_syntax_error_has_a_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(BASE + "train: [unclosed\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.line is not None


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_overrides():
    assert parse_override("train.gamma=0.5") == (("train", "gamma"), 0.5)
    assert parse_override("seeds=[1, 2]") == (("seeds",), [1, 2])
    cfg = loads_config(BASE, ["train.gamma=0", "seeds=[3]", "federation.rounds=5", "eval.soft=true"])
    assert cfg.train.gamma == 0.0 and cfg.seeds == [3] and cfg.federation.rounds == 5 and cfg.eval.soft
    for bad in ("gamma", "=1", "train.gamma=[", "name.x=1"):
        with pytest.raises(ConfigError):
            loads_config(BASE, [bad])


def test_sweep_axes():
    cfg = loads_config(BASE)
    assert apply_axis(cfg, "gamma", 0.1).train.gamma == 0.1
    assert apply_axis(cfg, "local_epochs", 3).train.local_epochs == 3
    assert apply_axis(cfg, "lambda", 0.2).task.heterogeneity == 0.2
    assert cfg.train.gamma != 0.1
    check_sweep(cfg, "tau", [0.5, 1.0])
    for axis, values in (("tau", [0.0]), ("gamma", [1, 1]), ("width", [1]), ("gamma", [])):
        with pytest.raises(ConfigError):
            check_sweep(cfg, axis, values)
    classify = loads_config(BASE.replace("kind: sequence", "kind: classify").replace("  vocab_size: 6\n", ""))
    with pytest.raises(ConfigError):
        check_sweep(classify, "lambda", [0.1])
