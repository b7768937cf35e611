import json

import pytest

from hypocert import cli

from .conftest import read_json, validate


def run(tmp_path, capsys, *args, config=None):
    argv = list(args) + ["--out", str(tmp_path / "out")]
    if config is not None:
        tmp_path.mkdir(parents=True, exist_ok=True)
        path = tmp_path / "run.ini"
        path.write_text(config)
        argv += ["--config", str(path)]
    code = cli.main(argv)
    cap = capsys.readouterr()
    doc = json.loads(cap.out) if cap.out.strip() else None
    return code, doc, cap.err


def strip_time(doc):
    doc = json.loads(json.dumps(doc))
    doc["metadata"].pop("timestamp")
    return doc


QUAD = "[model]\nd = 2\nsigma = 1.0\npotential = quadratic\na = 1.0, 1.0\n"
SMALL_TORUS = "[grid]\nn_x = 12\nn_alpha = 12\n[certify]\nn_g = 4\ntimes = 0.1, 1.0, 5.0\n"


# ---------------------------------------------------------------- verify-sphere

def test_verify_sphere_default(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "verify-sphere")
    assert code == 0 and doc["status"] == "pass" and doc["quadrature"] == "angle-grid"
    validate(doc, "verify-sphere")
    assert doc == read_json(tmp_path / "out" / "verify-sphere.json")


def test_verify_sphere_fault_names_identities(tmp_path, capsys):
    code, doc, err = run(tmp_path, capsys, "verify-sphere", "--fault", "sign-flip")
    assert code == 1 and "eigen_linear" in doc["failed"] and "check failed" in err


def test_verify_sphere_monte_carlo(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "verify-sphere", config="[model]\nd = 3\n[sampler]\nmc_nodes = 100000\n")
    assert code == 0 and doc["quadrature"] == "monte-carlo" and doc["nodes"] == 100000


# ---------------------------------------------------------------- rates

def test_rates_quadratic_example(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "rates", config=QUAD)
    assert code == 0
    assert doc["constants"] == {"lambda_m": 0.5, "lambda_M": 1.0, "n1": 0.25}
    assert doc["lambda_source"] == "bakry-emery" and doc["optimizer"] is None
    validate(doc, "rates")


def test_rates_with_supplied_n2(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "rates", config=QUAD + "n2 = 1.5\n")
    assert code == 0 and doc["n2_source"] == "supplied"
    assert 0 < doc["optimizer"]["eps_star"] < 1 and doc["optimizer"]["kappa2"] > 0
    validate(doc, "rates")


def test_rates_missing_poincare(tmp_path, capsys):
    code, doc, err = run(tmp_path, capsys, "rates", config="[model]\npotential = torus\n")
    assert code == 2 and doc is None
    assert "Poincare" in err and "model.poincare" in err


def test_rates_grid_lambda_and_elliptic_n2(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "rates", "--n2",
                       config="[model]\npotential = torus\n[grid]\nn_x = 16\n[certify]\nn2_samples = 4\n")
    assert code == 0 and doc["lambda_source"] == "grid" and doc["n2_source"] == "elliptic"
    assert doc["constants"]["lambda_M"] == pytest.approx(doc["lambda"] / 2)
    validate(doc, "rates")


def test_rates_grid_mode_mismatch(tmp_path, capsys):
    code, _, err = run(tmp_path, capsys, "rates", "--n2", config=QUAD + "[grid]\nmode = torus\n")
    assert code == 2 and "grid.mode" in err


def test_rates_are_byte_identical_modulo_timestamp(tmp_path, capsys):
    _, a, _ = run(tmp_path, capsys, "rates", config=QUAD + "n2 = 2.0\n")
    _, b, _ = run(tmp_path, capsys, "rates", config=QUAD + "n2 = 2.0\n")
    assert json.dumps(strip_time(a), sort_keys=True) == json.dumps(strip_time(b), sort_keys=True)


# ---------------------------------------------------------------- certify

def test_certify_small_torus(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "certify", config=SMALL_TORUS)
    assert code == 0 and doc["status"] == "pass"
    res = doc["result"]
    assert res["structure"]["passed"] and res["decay"]["passed"]
    assert res["certificate"]["provenance"]["n2"] == "measured"
    validate(doc, "certify")


def test_certify_zero_s_fault(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "certify", "--fault", "zero-s", config=SMALL_TORUS)
    assert code == 1 and "structure check failed" in doc["result"]["failure"]
    assert "microscopic_coercivity" in doc["result"]["structure"]["failures"]
    validate(doc, "certify")


def test_certify_noise_fault(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "certify", "--fault", "noise-a", config=SMALL_TORUS)
    assert code == 1 and "A_antisymmetry" in doc["result"]["structure"]["failures"]


def test_certify_refine_reports_ratios(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "certify", "--refine",
                       config="[grid]\nn_x = 16\nn_alpha = 16\n[certify]\nn_g = 2\ntimes = 1.0\n")
    assert code == 0
    assert doc["coarse"]["grid"]["n_x"] == 8
    for k in ("lambda_m", "lambda_M", "n1", "n2"):
        r = doc["refinement"][k]
        assert r["ratio"] == pytest.approx(r["fine"] / r["coarse"])
    validate(doc, "certify")


def test_certify_box_boundary_mass(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "certify",
                       config=QUAD + "[grid]\nmode = box\nn_x = 10\nn_alpha = 10\nhalf_width = 2.0\n")
    assert code == 1 and "boundary mass" in doc["result"]["failure"]


def test_certify_needs_d2(tmp_path, capsys):
    code, _, err = run(tmp_path, capsys, "certify", config="[model]\nd = 3\n")
    assert code == 2 and "d = 2" in err


# ---------------------------------------------------------------- simulate / decay

SIM = "[model]\npotential = torus\namplitude = 0.0\n[sampler]\nsteps = 40\nstride = 10\n"


def test_simulate_is_deterministic(tmp_path, capsys):
    run(tmp_path / "a", capsys, "simulate", "--seed", "4", config=SIM)
    run(tmp_path / "b", capsys, "simulate", "--seed", "4", config=SIM)
    run(tmp_path / "c", capsys, "simulate", "--seed", "5", config=SIM)
    a = (tmp_path / "a" / "out" / "trajectory.csv").read_bytes()
    assert a == (tmp_path / "b" / "out" / "trajectory.csv").read_bytes()
    assert a != (tmp_path / "c" / "out" / "trajectory.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == "t,x_1,x_2,omega_1,omega_2" and len(lines) == 6


def test_seed_flag_before_subcommand(tmp_path, capsys):
    code = cli.main(["--seed", "9", "simulate", "--out", str(tmp_path)])
    assert code == 2  # flags belong after the subcommand
    capsys.readouterr()


DECAY = SIM + "outer = 128\ninner = 32\ntimes = 0.0, 0.25, 0.5, 0.75, 1.0\n"


def test_decay_free_motion(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "decay", config=DECAY)
    assert code == 0 and doc["analytic_rate"] == 0.5
    lo, hi = doc["fit"]["ci95"]
    assert lo - 0.05 <= 0.5 <= hi + 0.05
    csv = (tmp_path / "out" / "decay.csv").read_text().splitlines()
    assert csv[0] == "t,estimate,se,corrected,bound" and len(csv) == 6


def test_decay_csv_reproducible(tmp_path, capsys):
    run(tmp_path / "a", capsys, "decay", config=DECAY)
    run(tmp_path / "b", capsys, "decay", config=DECAY)
    assert (tmp_path / "a" / "out" / "decay.csv").read_bytes() == (tmp_path / "b" / "out" / "decay.csv").read_bytes()


def test_decay_with_certificate(tmp_path, capsys):
    cfg = QUAD + "n2 = 2.0\n[sampler]\nouter = 64\ninner = 16\ntimes = 0.0, 0.5, 1.0, 1.5\n"
    code, doc, _ = run(tmp_path, capsys, "decay", config=cfg)
    assert code == 0 and doc["certificate"]["n2_source"] == "supplied"
    assert doc["max_excess_se"] <= 3.0


# ---------------------------------------------------------------- elliptic / gap / errors

def test_elliptic_refine(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "elliptic", "--refine",
                       config="[grid]\nn_x = 16\n[certify]\nn2_samples = 4\n")
    assert code == 0 and doc["refinement"]["grid_stable"]


def test_gap_quadratic(tmp_path, capsys):
    code, doc, _ = run(tmp_path, capsys, "gap", config=QUAD + "[grid]\nmode = box\nn_x = 48\nhalf_width = 6.0\n")
    assert code == 0 and doc["rel_error"] < 0.05


@pytest.mark.parametrize("argv", [["frobnicate"], ["rates", "--bogus"], []])
def test_bad_arguments_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    capsys.readouterr()


def test_bad_config_exit_2(tmp_path, capsys):
    code, _, err = run(tmp_path, capsys, "rates", config="[model]\nfoo = 1\n")
    assert code == 2 and "unknown key" in err
