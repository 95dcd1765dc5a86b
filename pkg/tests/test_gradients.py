import pytest

from grad_cases import CASES, THRESHOLD, run_case


@pytest.mark.parametrize("name,build", CASES, ids=[c[0] for c in CASES])
def test_finite_differences(name, build):
    err = run_case(build)
    assert err < THRESHOLD, f"{name}: max relative error {err:.3e}"
