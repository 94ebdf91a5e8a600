"""Shared fixtures: expensive pipeline runs are solved once per session."""

import numpy as np
import pytest

from bnbpep.bnb import run_pipeline
from bnbpep.presets import make_problem


@pytest.fixture(scope="session")
def sc1_pipeline():
    spec = make_problem("sc-grad", 1, mu=0.1)
    return run_pipeline(spec, stages=3, Mtilde=1.1, seed=0)


@pytest.fixture(scope="session")
def sc2_pipeline():
    spec = make_problem("sc-grad", 2, mu=0.1)
    return run_pipeline(spec, stages=3, Mtilde=1.1, seed=0,
                        node_limit=6000, time_limit=480)


@pytest.fixture(scope="session")
def sc3_stage2():
    spec = make_problem("sc-grad", 3, mu=0.1)
    return run_pipeline(spec, stages=2)


@pytest.fixture(scope="session")
def gd1_pipeline():
    spec = make_problem("gd-nomomentum", 1)
    return run_pipeline(spec, stages=3, Mtilde=1.1, seed=0)


@pytest.fixture(scope="session")
def gd2_pipeline():
    spec = make_problem("gd-nomomentum", 2)
    return run_pipeline(spec, stages=3, Mtilde=1.1, seed=0,
                        node_limit=6000, time_limit=300)


@pytest.fixture(scope="session")
def nc1_pipeline():
    spec = make_problem("nonconvex-grad", 1)
    return run_pipeline(spec, stages=3, Mtilde=1.1, seed=0,
                        node_limit=6000, time_limit=300)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def sc_patterns(sc1_pipeline, sc2_pipeline, sc3_stage2):
    """Minimal-support certificates for the template problem, N = 1..3.

    The certified (or locally refined) schedules are polished against the
    provisionally detected support before the final extraction; kinked
    minimizers otherwise leave microscopic multiplier mass that survives
    thresholding.
    """
    from bnbpep.inner import evaluate_worst_case
    from bnbpep.sparsifier import (expected_support, polish_to_pattern,
                                   sparse_certificate)

    out = {}
    for N, rep in ((1, sc1_pipeline), (2, sc2_pipeline), (3, sc3_stage2)):
        spec = make_problem("sc-grad", N, mu=0.1)
        cert0, pat0 = sparse_certificate(spec, rep.schedule, rep.objective,
                                         sense="min")
        provisional = {p for p, v in cert0.lambdas.items()
                       if v > 1e-4 * max(cert0.lambdas.values())}
        sched, _ = polish_to_pattern(spec, rep.schedule, provisional)
        p_star = evaluate_worst_case(spec, sched, 1e-10, 1e-10,
                                     solve_primal=False).value
        cert, pattern = sparse_certificate(spec, sched, p_star, sense="min")
        out[N] = {"cert": cert, "pattern": pattern, "schedule": sched,
                  "p_star": p_star}
    return out
