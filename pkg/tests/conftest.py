import numpy as np
import pytest

from cjsmooth.data import EncounterHistory
from cjsmooth.model import AgeClassMap, ModelSpec, ParamBlock
from cjsmooth.problem import Problem
from cjsmooth.simgen import SimConfig, simulate_dataset, simulation_spec


ACCEPTANCE_LINES = []


def pytest_report_header(config):
    return "cjsmooth test suite (slow tests marked 'slow')"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def report_acceptance(number: int, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def small_sim():
    """Two-age-class design at reduced size."""
    cfg = SimConfig(N=200, seed=11)
    return simulate_dataset(cfg)


@pytest.fixture(scope="session")
def small_problem(small_sim):
    spec = simulation_spec(small_sim.config, K=8, m=20)
    return Problem(spec, small_sim.histories)


@pytest.fixture(scope="session")
def section4_sim():
    return simulate_dataset(SimConfig(seed=7))


def constant_history_spec(T, survival_form="logistic_linear_in_covariate", K=None, domain=None):
    blocks = (
        ParamBlock("survival", survival_form, age_class=1, K=K, domain=domain),
        ParamBlock("recapture"),
        ParamBlock("recovery"),
    )
    return ModelSpec(T=T, regime="history_constant", blocks=blocks)


def random_history(rng, T, p_cov=0.7):
    """A valid history with first capture in 1..T-1 and random fate."""
    c = int(rng.integers(1, T))
    codes = np.zeros(T, dtype=int)
    cov = np.full(T, np.nan)
    codes[c - 1] = 1
    cov[c - 1] = rng.normal()
    for t in range(c + 1, T + 1):
        u = rng.random()
        if u < 0.15:
            codes[t - 1] = 2
            break
        if u < 0.6:
            codes[t - 1] = 1
            if rng.random() < p_cov:
                cov[t - 1] = rng.normal()
    return EncounterHistory(codes, cov)


def constant_covariate_histories(N, T, seed, phi_fn=lambda w: 1 / (1 + np.exp(-(0.5 + w))),
                                 p=0.6, lam=0.3):
    """Histories with one time-constant covariate per individual, recorded at first capture."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(N):
        w = rng.normal()
        c = int(rng.integers(1, T))
        codes = np.zeros(T, dtype=int)
        codes[c - 1] = 1
        for t in range(c + 1, T + 1):
            if rng.random() > phi_fn(w):
                if rng.random() < lam:
                    codes[t - 1] = 2
                break
            if rng.random() < p:
                codes[t - 1] = 1
        cov = np.full(T, np.nan)
        cov[c - 1] = w
        out.append(EncounterHistory(codes, cov))
    return out


@pytest.fixture(scope="session")
def constant_cov_data():
    return constant_covariate_histories(400, 7, seed=21)
