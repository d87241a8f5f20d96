"""
Bismut 型推定量のテスト
"""

import math

import numpy as np
import pytest

from mfbismut.bismut import (
    beta_weight,
    bismut_term1,
    bismut_term2,
    intrinsic_derivative,
    stochastic_increment,
)
from mfbismut.config import load_run_config, preset_path
from mfbismut.ensemble import InitialLaw
from mfbismut.errors import MissingIncrements, OutOfRange
from mfbismut.experiment import build_setup
from mfbismut.oracles import fd_family, halving_increments
from mfbismut.params import DiffusionSpec, DriftSpec, build_coefficients
from mfbismut.simulator import PathLog, TestFunction, simulate_decoupled, simulate_mv
from mfbismut.variation import PhiSpec
from tests.conftest import make_setup

SPREAD_LAW = InitialLaw(kind="gaussian", location=[0.5], scale=0.25)
IDENTITY_PHI = PhiSpec(kind="affine", matrix=[[1.0]], vector=[0.0])


@pytest.mark.parametrize(
    "kind,t,s,expected",
    [
        ("linear", 2.0, 1.0, (0.5, 0.5)),
        ("linear", 1.0, 0.0, (0.0, 1.0)),
        ("smoothstep", 1.0, 0.5, (0.5, 1.5)),
        ("smoothstep", 1.0, 0.0, (0.0, 0.0)),
        ("smoothstep", 2.0, 2.0, (1.0, 0.0)),
    ],
)
def test_beta_weight(kind, t, s, expected):
    """β(s), β'(s) の値"""
    assert beta_weight(kind, t, s) == pytest.approx(expected)


@pytest.mark.parametrize("t,s", [(0.0, 0.0), (1.0, -0.1), (1.0, 1.5)])
def test_beta_weight_out_of_range(t, s):
    """t ≤ 0 または s ∉ [0, t] はエラー"""
    with pytest.raises(OutOfRange):
        beta_weight("linear", t, s)


def test_beta_weight_unknown_kind():
    """未知の β はエラー"""
    with pytest.raises(OutOfRange):
        beta_weight("cubic", 1.0, 0.5)


def test_stochastic_increment_nonsymmetric_diffusion():
    """非対称な σ でも ⟨u, ζΔW⟩ = ⟨σ⁻¹u, ΔW⟩"""
    sigma = np.array([[1.0, 0.5], [0.0, 2.0]])
    coeffs = build_coefficients(DriftSpec(), DiffusionSpec(matrix=sigma.tolist()), 2)
    rng = np.random.default_rng(3)
    u = rng.standard_normal((4, 2))
    dw = rng.standard_normal((4, 2))
    expected = np.einsum("ni,ni->n", np.linalg.solve(sigma, u.T).T, dw)
    np.testing.assert_allclose(stochastic_increment(coeffs, 0.0, u, u, dw), expected, rtol=1e-12)
    # σ⁻ᵀ を使うと値が変わる（ζ の向きの取り違えを検出する）
    wrong = np.einsum("ni,ni->n", np.linalg.solve(sigma.T, u.T).T, dw)
    assert not np.allclose(expected, wrong)


def test_zero_kernel_has_no_measure_term():
    """相互作用なしでは第2項は厳密に0"""
    estimate = intrinsic_derivative(make_setup(N=100, M=10))
    assert estimate.term2 == 0.0
    assert estimate.se_term2 == 0.0
    assert estimate.total == estimate.term1
    assert [name for name, _, _ in estimate.rows()] == ["term1", "term2", "total"]


def test_heat_semigroup(heat_value):
    """ブラウン運動・sin・δ₀ では D P_1 f = e^(-1/2)"""
    estimate = intrinsic_derivative(make_setup(N=20000, M=50, seed=20240601))
    assert abs(estimate.total - heat_value) <= 4 * estimate.se_total
    assert estimate.gradient_bound_ratio == pytest.approx(abs(estimate.total))


def test_heat_semigroup_smoothstep(heat_value):
    """β を smoothstep にしても同じ値を推定する"""
    estimate = intrinsic_derivative(make_setup(N=20000, M=50, seed=5, beta="smoothstep"))
    assert abs(estimate.total - heat_value) <= 4 * estimate.se_total


def test_linear_drift():
    """b(x) = -x, sin, δ₀ では D P_1 f = e^(-1) exp(-(1-e^(-2))/4)"""
    expected = math.exp(-1.0) * math.exp(-(1.0 - math.exp(-2.0)) / 4.0)
    assert expected == pytest.approx(0.29636, abs=1e-5)
    setup = make_setup(N=20000, M=100, seed=7, drift=DriftSpec(family="linear", matrix=[[-1.0]]))
    estimate = intrinsic_derivative(setup)
    assert abs(estimate.total - expected) <= 4 * estimate.se_total + 0.005


def test_reproducible():
    """同じ設定・同じ seed なら結果は完全に一致する"""
    setup = make_setup(N=60, M=10, seed=2)
    assert intrinsic_derivative(setup) == intrinsic_derivative(setup)


def test_recorded_paths_match_streaming(bench_setup):
    """記録した経路から計算した各項は逐次加算の結果と一致する"""
    setup = bench_setup.replace(N=40)
    estimate = intrinsic_derivative(setup)

    mv_log = PathLog(record_variations=True)
    _, flow = simulate_mv(
        setup.law, setup.coeffs, setup.kernel, setup.grid, setup.N, setup.seed,
        record_flow=True, phi=setup.phi, observers=[mv_log],
    )
    dec_log = PathLog(record_jacobians=True)
    simulate_decoupled(
        mv_log.initial, flow, setup.coeffs, setup.kernel, setup.seed,
        with_jacobian=True, observers=[dec_log],
    )
    term1, se1 = bismut_term1(dec_log, None, setup.coeffs, setup.f, setup.phi, setup.beta)
    term2, se2 = bismut_term2(mv_log, None, setup.coeffs, setup.kernel, setup.f)
    assert term1 == pytest.approx(estimate.term1, rel=1e-10, abs=1e-12)
    assert term2 == pytest.approx(estimate.term2, rel=1e-10, abs=1e-12)
    assert se1 == pytest.approx(estimate.se_term1, rel=1e-10, abs=1e-12)
    assert se2 == pytest.approx(estimate.se_term2, rel=1e-10, abs=1e-12)


def test_missing_increments():
    """増分を記録していない経路では確率積分を計算できない"""
    setup = make_setup(N=5, M=4)
    log = PathLog(record_increments=False, record_jacobians=True)
    _, flow = simulate_mv(setup.law, setup.coeffs, setup.kernel, setup.grid, 5, 0, record_flow=True)
    simulate_decoupled(flow.snapshots[0], flow, setup.coeffs, setup.kernel, 0, with_jacobian=True, observers=[log])
    with pytest.raises(MissingIncrements):
        bismut_term1(log, None, setup.coeffs, setup.f, setup.phi, "linear")


def test_two_ensemble_mode_without_interaction():
    """相互作用なしでは独立なフローを使っても結果は同じ"""
    single = intrinsic_derivative(make_setup(N=50, M=10, seed=4))
    two = intrinsic_derivative(make_setup(N=50, M=10, seed=4, ensemble_mode="two"))
    assert two.total == single.total
    assert two.term2 == 0.0


def test_two_ensemble_mode_with_interaction(bench_setup):
    """相互作用ありでは独立なフローの結果は有限で、単一アンサンブルと統計的に近い"""
    setup = bench_setup.replace(N=200)
    single = intrinsic_derivative(setup)
    two = intrinsic_derivative(setup.replace(ensemble_mode="two"))
    assert math.isfinite(two.total)
    assert abs(two.total - single.total) <= 4 * math.hypot(two.se_total, single.se_total) + 0.05


def test_linear_in_direction(bench_setup):
    """φ を2倍すると推定値も2倍、φ=0 では0"""
    setup = bench_setup.replace(N=50)
    base = intrinsic_derivative(setup)
    doubled = intrinsic_derivative(setup.replace(phi=PhiSpec(vector=[2.0])))
    assert doubled.term1 == pytest.approx(2 * base.term1, rel=1e-12, abs=1e-14)
    assert doubled.term2 == pytest.approx(2 * base.term2, rel=1e-12, abs=1e-14)
    zero = intrinsic_derivative(setup.replace(phi=PhiSpec(vector=[0.0])))
    assert zero.total == 0.0
    assert zero.moment_bound_ratio is None


def test_negated_direction(bench_setup):
    """φ を -1 倍すると各項の符号だけが反転する"""
    setup = bench_setup.replace(N=50, law=SPREAD_LAW, phi=IDENTITY_PHI)
    base = intrinsic_derivative(setup)
    negated = intrinsic_derivative(setup.replace(phi=IDENTITY_PHI.scaled(-1.0)))
    assert negated.term1 == pytest.approx(-base.term1, rel=1e-12, abs=1e-14)
    assert negated.term2 == pytest.approx(-base.term2, rel=1e-12, abs=1e-14)
    assert negated.se_total == pytest.approx(base.se_total, rel=1e-12, abs=1e-14)


def test_additive_in_direction(bench_setup):
    """φ₁+φ₂ の推定値は φ₁, φ₂ の推定値の和"""
    setup = bench_setup.replace(N=50, law=SPREAD_LAW)
    first = intrinsic_derivative(setup.replace(phi=IDENTITY_PHI))
    second = intrinsic_derivative(setup.replace(phi=PhiSpec(vector=[1.0])))
    combined = intrinsic_derivative(
        setup.replace(phi=PhiSpec(kind="affine", matrix=[[1.0]], vector=[1.0]))
    )
    assert combined.term1 == pytest.approx(first.term1 + second.term1, rel=1e-10, abs=1e-12)
    assert combined.term2 == pytest.approx(first.term2 + second.term2, rel=1e-10, abs=1e-12)


def test_estimate_metadata(bench_setup):
    """推定結果は粒子数・ステップ数・seed を保持する"""
    estimate = intrinsic_derivative(bench_setup.replace(N=30))
    assert estimate.n_particles == 30
    assert estimate.n_steps == 40
    assert estimate.seed == 11
    assert estimate.horizon == 0.5
    assert estimate.beta == "linear"
    assert estimate.se_total >= 0.0


@pytest.mark.slow
def test_gaussian_kernel_agrees_with_finite_differences(bench_setup):
    """ガウス型カーネルで Bismut 推定量と CRN 差分商が一致する"""
    setup = bench_setup.replace(N=1000)
    estimate = intrinsic_derivative(setup)
    family = fd_family(setup, [0.02, 0.01])
    fd = family[-1]
    allowance = halving_increments(family)[0][1]
    tolerance = 4 * math.hypot(estimate.se_total, fd.std_error) + allowance
    assert abs(estimate.total - fd.estimate) <= tolerance


def test_unbounded_function_has_no_gradient_ratio():
    """非有界な f では勾配上界の比を計算しない"""
    estimate = intrinsic_derivative(
        make_setup(N=20, M=5, f=TestFunction(kind="coordinate"), law=InitialLaw(kind="gaussian", location=[0.0]))
    )
    assert estimate.gradient_bound_ratio is None


@pytest.mark.slow
def test_heat_semigroup_preset(heat_value):
    """heat_semigroup プリセット（N=100000, M=200）は 3 標準誤差以内で e^(-1/2) を再現する"""
    setup = build_setup(load_run_config(preset_path("heat_semigroup")))
    estimate = intrinsic_derivative(setup)
    assert estimate.term2 == 0.0
    assert abs(estimate.total - heat_value) <= 3 * estimate.se_total


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_beta_choice_does_not_change_estimate(seed):
    """β が linear でも smoothstep でも推定値の差は標準誤差の範囲"""
    setup = make_setup(N=20000, M=50, seed=seed)
    linear = intrinsic_derivative(setup)
    smooth = intrinsic_derivative(setup.replace(beta="smoothstep"))
    assert abs(linear.total - smooth.total) <= 3 * math.hypot(linear.se_total, smooth.se_total)
