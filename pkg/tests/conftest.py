import numpy as np
import pytest

from urpa.envgen import DomainSpec, generate_domain
from urpa.policy import PolicyParams, init_policy

SMALL_SPEC = DomainSpec(profile_length=12, embed_dim=4)


def random_params(context_dim: int, seed: int, scale: float = 0.5) -> PolicyParams:
    """Grammar-prior policy with random perturbations on every parameter block."""
    p = init_policy(context_dim, seed=seed, init_scale=scale)
    rng = np.random.default_rng(seed + 17)
    return PolicyParams(p.U, p.V + scale * rng.standard_normal(p.V.shape), p.b + scale * rng.standard_normal(p.b.shape))


@pytest.fixture(scope="session")
def small_samples():
    samples, _ = generate_domain(SMALL_SPEC, 24, seed=5)
    return samples


@pytest.fixture(scope="session")
def default_samples():
    samples, _ = generate_domain(DomainSpec(), 32, seed=3)
    return samples


def tiny_config(**overrides):
    """A fast end-to-end configuration for pipeline and CLI tests."""
    from urpa.config import default_config

    base = {
        "n_source": 300, "n_target_pool": 200, "eval_set_size": 40, "source_steps": 20,
        "theorem_samples": 4, "theorem_G": [8, 32], "adapt.k_shots": 20, "grpo.batch_size": 8,
    }
    base.update(overrides)
    return default_config().with_overrides(**base)


_CRITERIA: dict = {}


class CriterionRecorder:
    def __call__(self, number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
