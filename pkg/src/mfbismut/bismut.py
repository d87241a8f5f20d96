"""
内在微分 D_φ P_t f(μ) の2項 Bismut 型推定量

第1項は凍結フロー上の分離SDEのヤコビ行列から、第2項は相互作用系の変分場から
確率積分の重みを作る。どちらも ⟨u, ζ ΔW⟩ の左端点和で、ステップごとに逐次加算する。
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np

from .ensemble import Ensemble, derive_seed
from .errors import MissingIncrements, OutOfRange
from .params import CoefficientSet, KernelSpec, zeta
from .simulator import (
    PathLog,
    StepView,
    TestFunction,
    mean_and_se,
    simulate_decoupled,
    simulate_mv,
)
from .variation import PhiSpec, interaction_linearization

if TYPE_CHECKING:
    from .experiment import ExperimentSetup

BetaKind = Literal["linear", "smoothstep"]

# 独立なフロー用アンサンブルの seed タグ
FLOW_ENSEMBLE_TAG = 1


def beta_weight(kind: BetaKind, t: float, s: float) -> tuple[float, float]:
    """
    β(s) と β'(s) を返す（β(0)=0, β(t)=1）

    Raises:
        OutOfRange: t ≤ 0 または s ∉ [0, t] の場合
    """
    if not t > 0:
        raise OutOfRange(f"t は正である必要があります: t={t}")
    if not 0.0 <= s <= t:
        raise OutOfRange(f"s は [0, t] にある必要があります: s={s}, t={t}")
    if kind == "linear":
        return s / t, 1.0 / t
    if kind == "smoothstep":
        u = s / t
        return 3.0 * u * u - 2.0 * u**3, 6.0 * s * (t - s) / t**3
    raise OutOfRange(f"未知の β の種類です: {kind}")


def stochastic_increment(
    coeffs: CoefficientSet, t: float, x: np.ndarray, u: np.ndarray, dw: np.ndarray
) -> np.ndarray:
    """粒子ごとの ⟨u, ζ_t(x) ΔW⟩"""
    return np.einsum("ni,nij,nj->n", u, zeta(coeffs, t, x), dw)


@dataclass
class Term1Accumulator:
    """I^i = Σ_m β'(s_m)⟨ζ J^i φ(X₀^i), ΔW^i_m⟩ を分離SDEの各ステップで加算する"""

    coeffs: CoefficientSet
    beta: BetaKind
    horizon: float
    directions: np.ndarray
    weights: np.ndarray = field(init=False)
    final: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.zeros(self.directions.shape[0])

    def observe(self, view: StepView) -> None:
        if view.jacobians is None:
            raise OutOfRange("第1項にはヤコビ行列の発展が必要です")
        _, beta_prime = beta_weight(self.beta, self.horizon, view.t)
        u = beta_prime * np.einsum("nij,nj->ni", view.jacobians, self.directions)
        self.weights += stochastic_increment(self.coeffs, view.t, view.positions, u, view.increments)

    def finalize(self, ensemble: Ensemble, t: float) -> None:
        self.final = ensemble.positions.copy()


@dataclass
class Term2Accumulator:
    """K^i = Σ_m ⟨ζ Ĝ^i_m, ΔW^i_m⟩ を相互作用系の各ステップで加算する（β の重みなし）"""

    coeffs: CoefficientSet
    weights: np.ndarray | None = None
    initial: np.ndarray | None = None
    final: np.ndarray | None = None
    needs_measure_term: bool = True

    def observe(self, view: StepView) -> None:
        if view.measure_term is None:
            raise OutOfRange("第2項には変分場の発展が必要です")
        if self.weights is None:
            self.initial = view.positions.copy()
            self.weights = np.zeros(view.positions.shape[0])
        self.weights += stochastic_increment(
            self.coeffs, view.t, view.positions, view.measure_term, view.increments
        )

    def finalize(self, ensemble: Ensemble, t: float) -> None:
        self.final = ensemble.positions.copy()
        if self.weights is None:
            self.weights = np.zeros(ensemble.N)


def _require_increments(trajectories: PathLog) -> None:
    if not trajectories.record_increments or len(trajectories.increments) != len(trajectories.times):
        raise MissingIncrements()
    if trajectories.final is None or trajectories.horizon is None:
        raise OutOfRange("経路の記録が完了していません")


def bismut_term1(
    trajectories: PathLog,
    jacobians: Sequence[np.ndarray] | None,
    coeffs: CoefficientSet,
    f: TestFunction,
    phi: PhiSpec,
    beta_kind: BetaKind,
) -> tuple[float, float]:
    """
    第1項 E[f(X_T) Σ β'(s_m)⟨ζ J φ(X₀), ΔW_m⟩] を記録済みの分離SDEの経路から計算する

    Args:
        trajectories: 増分・位置を記録した分離SDEの PathLog
        jacobians: 各節点の J（None なら trajectories.jacobians）

    Raises:
        MissingIncrements: 増分が記録されていない場合
    """
    _require_increments(trajectories)
    jacobians = trajectories.jacobians if jacobians is None else jacobians
    if len(jacobians) != len(trajectories.times) or not trajectories.record_positions:
        raise OutOfRange("各節点の位置とヤコビ行列が必要です")
    directions = phi.apply(trajectories.initial)
    weights = np.zeros(directions.shape[0])
    for t, x, dw, jac in zip(
        trajectories.times, trajectories.positions, trajectories.increments, jacobians, strict=True
    ):
        _, beta_prime = beta_weight(beta_kind, trajectories.horizon, t)
        u = beta_prime * np.einsum("nij,nj->ni", jac, directions)
        weights += stochastic_increment(coeffs, t, x, u, dw)
    return mean_and_se(f.evaluate(trajectories.final) * weights)


def bismut_term2(
    trajectories: PathLog,
    variations: Sequence[np.ndarray] | None,
    coeffs: CoefficientSet,
    kernel: KernelSpec,
    f: TestFunction,
) -> tuple[float, float]:
    """
    第2項 E[f(X_T) Σ ⟨ζ Ĝ_m, ΔW_m⟩] を記録済みの相互作用系の経路から計算する

    Ĝ^i_m = -(1/(N-1)) Σ_{j≠i} ∇h(X^i - X^j) v^j

    Raises:
        MissingIncrements: 増分が記録されていない場合
    """
    _require_increments(trajectories)
    variations = trajectories.variations if variations is None else variations
    if len(variations) != len(trajectories.times) or not trajectories.record_positions:
        raise OutOfRange("各節点の位置と変分が必要です")
    weights = np.zeros(trajectories.final.shape[0])
    for t, kernel_t, x, dw, v in zip(
        trajectories.times,
        trajectories.kernel_times,
        trajectories.positions,
        trajectories.increments,
        variations,
        strict=True,
    ):
        _, measure = interaction_linearization(kernel, kernel_t, x, v, with_measure_term=True)
        weights += stochastic_increment(coeffs, t, x, measure, dw)
    return mean_and_se(f.evaluate(trajectories.final) * weights)


@dataclass
class BismutEstimate:
    """内在微分の推定結果"""

    term1: float
    term2: float
    total: float
    se_term1: float
    se_term2: float
    se_total: float
    n_particles: int
    n_steps: int
    seed: int
    config_digest: str
    horizon: float
    beta: BetaKind
    gradient_bound_ratio: float | None = None
    moment_bound_ratio: float | None = None

    def rows(self) -> list[tuple[str, float, float]]:
        return [
            ("term1", self.term1, self.se_term1),
            ("term2", self.term2, self.se_term2),
            ("total", self.total, self.se_total),
        ]


def _moment_bound_ratio(
    total: float, horizon: float, f_values: np.ndarray, directions: np.ndarray, p: float
) -> float | None:
    if not p > 1:
        return None
    q = p / (p - 1.0)
    f_norm = float(np.mean(np.abs(f_values) ** q)) ** (1.0 / q)
    eta_norm = float(np.mean(np.linalg.norm(directions, axis=-1) ** p)) ** (1.0 / p)
    denominator = f_norm * eta_norm
    if denominator == 0.0:
        return None
    return abs(total) * math.sqrt(horizon) / denominator


def intrinsic_derivative(setup: "ExperimentSetup") -> BismutEstimate:
    """
    D_φ P_T f(μ) を2項 Bismut 型公式で推定する

    1. 相互作用系を変分付きで発展させ、測度フローを記録しつつ第2項の重みを積む
    2. 記録したフロー（two モードでは独立なアンサンブルのフロー）で分離SDEとヤコビ行列を
       同じ初期位置・同じ増分で発展させ、第1項の重みを積む
    """
    grid = setup.grid
    term2 = Term2Accumulator(setup.coeffs)
    ensemble, flow = simulate_mv(
        setup.law,
        setup.coeffs,
        setup.kernel,
        grid,
        setup.N,
        setup.seed,
        record_flow=True,
        stream_ids=setup.stream_ids,
        phi=setup.phi,
        observers=[term2],
    )
    if setup.ensemble_mode == "two":
        _, flow = simulate_mv(
            setup.law,
            setup.coeffs,
            setup.kernel,
            grid,
            setup.N,
            derive_seed(setup.seed, FLOW_ENSEMBLE_TAG),
            record_flow=True,
        )
    assert flow is not None and term2.initial is not None

    directions = setup.phi.apply(term2.initial)
    term1 = Term1Accumulator(setup.coeffs, setup.beta, grid.T, directions)
    simulate_decoupled(
        term2.initial,
        flow,
        setup.coeffs,
        setup.kernel,
        setup.seed,
        grid=grid,
        stream_ids=setup.stream_ids,
        with_jacobian=True,
        observers=[term1],
    )

    f_interacting = setup.f.evaluate(ensemble.positions)
    samples1 = setup.f.evaluate(term1.final) * term1.weights
    samples2 = f_interacting * term2.weights
    value1, se1 = mean_and_se(samples1)
    value2, se2 = mean_and_se(samples2)
    _, se_total = mean_and_se(samples1 + samples2)
    total = value1 + value2

    sup_norm = setup.f.sup_norm()
    gradient_ratio = (
        abs(total) * math.sqrt(grid.T) / sup_norm if math.isfinite(sup_norm) and sup_norm > 0 else None
    )
    return BismutEstimate(
        term1=value1,
        term2=value2,
        total=total,
        se_term1=se1,
        se_term2=se2,
        se_total=se_total,
        n_particles=setup.N,
        n_steps=grid.M,
        seed=setup.seed,
        config_digest=setup.config_digest,
        horizon=grid.T,
        beta=setup.beta,
        gradient_bound_ratio=gradient_ratio,
        moment_bound_ratio=_moment_bound_ratio(total, grid.T, f_interacting, directions, setup.p),
    )
