import math

import numpy as np
import pytest

from eposenet.config import ConfigError, RunConfig, load_config, parse_lines, require
from eposenet.geom import quat_from_yaw
from eposenet.metrics import accuracy_at, evaluate, median
from eposenet.tensor import ContractError


def test_median_examples():
    assert median([9, 1, 2]) == 2
    assert median([4, 1, 3, 2]) == 2.5
    assert median([7.0]) == 7.0
    with pytest.raises(ContractError):
        median([])


def test_accuracy_is_conjunctive_and_strict():
    et = np.array([0.05, 0.05, 0.2, 0.1])
    er = np.array([5.0, 20.0, 5.0, 5.0])
    assert accuracy_at(et, er, 0.1, 10.0) == 0.25


def test_evaluate_per_sample_consistency():
    rng = np.random.default_rng(0)
    M = 11
    t_gt = rng.standard_normal((M, 3))
    t_pr = t_gt + 0.1 * rng.standard_normal((M, 3))
    yaw = rng.uniform(-0.3, 0.3, M)
    q_gt = np.array([quat_from_yaw(0.0)] * M)
    q_pr = np.array([quat_from_yaw(a) for a in yaw])
    rep = evaluate(t_pr, q_pr, t_gt, q_gt, [f"s{i}" for i in range(M)], 0.15, 10.0)
    et = [s["t_err_m"] for s in rep["per_sample"]]
    er = [s["r_err_deg"] for s in rep["per_sample"]]
    assert rep["median_t_m"] == median(et) and rep["median_r_deg"] == median(er)
    assert rep["acc@thresh"] == np.mean([(a < 0.15) and (b < 10.0) for a, b in zip(et, er)])
    np.testing.assert_allclose(er, np.degrees(np.abs(yaw)), atol=1e-9)
    assert list(rep) == ["median_t_m", "median_r_deg", "acc@thresh", "thresh_t_m", "thresh_r_deg",
                         "count", "per_sample"]


def test_evaluate_rejects_bad_thresholds():
    with pytest.raises(ContractError):
        evaluate(np.zeros((1, 3)), [[1, 0, 0, 0]], np.zeros((1, 3)), [[1, 0, 0, 0]], ["a"], 0.0, 10)


def test_parse_lines_comments_and_types():
    cfg = RunConfig()
    keys = parse_lines(cfg, "# header\nN = 4  # trailing\n\nwidths = 8, 8,8,8,8\nbatchnorm = off\nlr=0.5\n", "c.txt")
    assert keys == {"N", "widths", "batchnorm", "lr"}
    assert cfg.N == 4 and cfg.widths == (8, 8, 8, 8, 8) and cfg.batchnorm is False and cfg.lr == 0.5


@pytest.mark.parametrize("text,fragment", [
    ("N = 4\nbogus = 1\n", "c.txt:2: unknown key 'bogus'"),
    ("N = four\n", "c.txt:1: bad value for 'N'"),
    ("just words\n", "c.txt:1: expected"),
])
def test_parse_errors_name_file_and_line(text, fragment):
    with pytest.raises(ConfigError) as e:
        parse_lines(RunConfig(), text, "c.txt")
    assert fragment in str(e.value)


def test_load_config_precedence(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 3\nN = 4\nout = a\n")
    cfg, given = load_config(str(p), ["N=8"], seed=5, out="b")
    assert (cfg.seed, cfg.N, cfg.out) == (5, 8, "b")
    assert {"seed", "N", "out"} <= given


def test_require_message():
    cfg, given = load_config()
    with pytest.raises(ConfigError, match=r"train: missing required key 'out' .*--out"):
        require(cfg, given, ["out"], "train")


def test_to_text_roundtrip():
    cfg = RunConfig(N=4, widths=(8, 8, 8, 8, 8), batchnorm=False, lr=math.pi, texture="noise")
    back = RunConfig()
    parse_lines(back, cfg.to_text(), "x")
    assert back == cfg


def test_derived_configs():
    cfg = RunConfig(N=4, widths=(8, 8, 8, 8, 8), epochs=7, n_train=3, contrast_lo=0.1)
    assert cfg.model_config().N == 4 and cfg.model_config(1).N == 1
    assert cfg.train_config().epochs == 7
    spec = cfg.dataset_spec()
    assert spec.n_train == 3 and spec.scene.contrast[0] == 0.1
