"""
McKean-Vlasov SDE の相互作用粒子近似と凍結フロー上の分離SDE

どちらの時間発展も左端点の Euler-Maruyama 法で進める。各ステップの状態は
StepView としてオブザーバに渡され、推定量はそこから確率積分を逐次に積み上げる。
"""

import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import ClassVar, Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .ensemble import (
    Ensemble,
    InitialLaw,
    TimeGrid,
    init_ensemble,
    map_particle_chunks,
    pair_chunk_rows,
)
from .errors import InvalidGrid, OutOfRange
from .params import CoefficientSet, KernelSpec, kernel_eval, pair_differences
from .variation import (
    PhiSpec,
    advance_jacobian,
    advance_variation,
    frozen_gradient,
    interaction_linearization,
)

# ---------------------------------------------------------------------------
# 測度フロー・テスト関数
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MeasureFlow:
    """各グリッド節点での粒子位置（μ_s の経験近似）"""

    grid: TimeGrid
    snapshots: list[np.ndarray]

    def __post_init__(self):
        if len(self.snapshots) != self.grid.M + 1:
            raise InvalidGrid(
                f"スナップショット数 {len(self.snapshots)} が節点数 {self.grid.M + 1} と一致しません"
            )
        shapes = {snapshot.shape for snapshot in self.snapshots}
        if len(shapes) != 1:
            raise InvalidGrid("スナップショットの粒子数・次元が揃っていません")

    @property
    def N(self) -> int:
        return int(self.snapshots[0].shape[0])


class TestFunction(BaseModel):
    """テスト関数 f"""

    __test__: ClassVar[bool] = False
    model_config = ConfigDict(extra="forbid")

    kind: Literal["coordinate", "sine", "smoothed_indicator"] = Field(
        default="sine",
        description="coordinate: ⟨u,x⟩（非有界・診断用）, sine: offset + amplitude·sin(⟨ω,x⟩+phase), smoothed_indicator: ½(1+tanh((width-|x-center|)/softness))",
    )
    direction: list[float] | None = Field(
        default=None, description="coordinate の方向 u（省略時は e₁）"
    )
    frequency: list[float] | None = Field(default=None, description="sine の周波数 ω（省略時は e₁）")
    phase: float = Field(default=0.0, description="sine の位相")
    amplitude: float = Field(default=1.0, description="sine の振幅")
    offset: float = Field(default=0.0, description="sine の定数項")
    center: list[float] | None = Field(
        default=None, description="smoothed_indicator の中心（省略時は原点）"
    )
    width: float = Field(default=1.0, gt=0, description="smoothed_indicator の半径")
    softness: float = Field(default=0.1, gt=0, description="smoothed_indicator の境界の幅")

    @property
    def bounded(self) -> bool:
        return self.kind != "coordinate"

    def sup_norm(self) -> float:
        """‖f‖_∞ の上界（非有界なら inf）"""
        if self.kind == "sine":
            return abs(self.offset) + abs(self.amplitude)
        if self.kind == "smoothed_indicator":
            return 1.0
        return float("inf")

    def _vector(self, value: list[float] | None, d: int, unit: bool) -> np.ndarray:
        if value is None:
            arr = np.zeros(d)
            if unit:
                arr[0] = 1.0
            return arr
        arr = np.asarray(value, dtype=float)
        if arr.shape != (d,):
            raise OutOfRange(f"テスト関数のベクトルの長さが次元 d={d} と一致しません")
        return arr

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """形状 (..., d) の点で f を評価する"""
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        if self.kind == "coordinate":
            return x @ self._vector(self.direction, d, unit=True)
        if self.kind == "sine":
            omega = self._vector(self.frequency, d, unit=True)
            return self.offset + self.amplitude * np.sin(x @ omega + self.phase)
        center = self._vector(self.center, d, unit=False)
        radius = np.linalg.norm(x - center, axis=-1)
        return 0.5 * (1.0 + np.tanh((self.width - radius) / self.softness))


def estimate_ptf(ensemble: Ensemble, f: TestFunction) -> tuple[float, float]:
    """
    P_t f(μ) を粒子平均で推定する

    Returns:
        (標本平均, 標準誤差 = 標本標準偏差/√N)
    """
    if not f.bounded:
        warnings.warn("非有界なテスト関数（coordinate）は診断用です", stacklevel=2)
    return mean_and_se(f.evaluate(ensemble.positions))


def mean_and_se(samples: np.ndarray) -> tuple[float, float]:
    """標本平均と標準誤差（N=1 では標準誤差0）"""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = float(np.mean(samples))
    if n < 2:
        return mean, 0.0
    return mean, float(np.std(samples, ddof=1) / np.sqrt(n))


# ---------------------------------------------------------------------------
# ステップごとのオブザーバ
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepView:
    """
    ステップ m の更新前の状態

    positions/variations/jacobians は節点 t_m の値、increments はこのステップの ΔW_m。
    interaction はこのステップで使った相互作用ドリフト、measure_term は
    Ĝ_m = -(1/(N-1)) Σ_{j≠i} ∇h(X^i - X^j) v^j（要求された場合のみ）。
    """

    m: int
    t: float
    dt: float
    kernel_t: float
    positions: np.ndarray
    increments: np.ndarray
    interaction: np.ndarray
    variations: np.ndarray | None = None
    jacobians: np.ndarray | None = None
    measure_term: np.ndarray | None = None


class StepObserver(Protocol):
    def observe(self, view: StepView) -> None: ...

    def finalize(self, ensemble: Ensemble, t: float) -> None: ...


@dataclass
class PathLog:
    """経路・増分・変分・ヤコビ行列を節点ごとに保持するオブザーバ"""

    record_positions: bool = True
    record_increments: bool = True
    record_variations: bool = False
    record_jacobians: bool = False
    record_measure_term: bool = False
    times: list[float] = field(default_factory=list)
    dts: list[float] = field(default_factory=list)
    kernel_times: list[float] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    increments: list[np.ndarray] = field(default_factory=list)
    variations: list[np.ndarray] = field(default_factory=list)
    jacobians: list[np.ndarray] = field(default_factory=list)
    measure_terms: list[np.ndarray] = field(default_factory=list)
    initial: np.ndarray | None = None
    final: np.ndarray | None = None
    final_variations: np.ndarray | None = None
    horizon: float | None = None

    @property
    def needs_measure_term(self) -> bool:
        return self.record_measure_term

    def observe(self, view: StepView) -> None:
        if self.initial is None:
            self.initial = view.positions.copy()
        self.times.append(view.t)
        self.dts.append(view.dt)
        self.kernel_times.append(view.kernel_t)
        if self.record_positions:
            self.positions.append(view.positions)
        if self.record_increments:
            self.increments.append(view.increments)
        if self.record_variations and view.variations is not None:
            self.variations.append(view.variations)
        if self.record_jacobians and view.jacobians is not None:
            self.jacobians.append(view.jacobians)
        if self.record_measure_term and view.measure_term is not None:
            self.measure_terms.append(view.measure_term)

    def finalize(self, ensemble: Ensemble, t: float) -> None:
        self.horizon = t
        self.final = ensemble.positions.copy()
        if ensemble.variations is not None:
            self.final_variations = ensemble.variations.copy()


def _needs_measure_term(observers: Sequence[StepObserver]) -> bool:
    return any(getattr(observer, "needs_measure_term", False) for observer in observers)


# ---------------------------------------------------------------------------
# 時間発展
# ---------------------------------------------------------------------------


def interaction_drift(
    kernel: KernelSpec, t: float, x: np.ndarray, y: np.ndarray, *, exclude_self: bool = False
) -> np.ndarray:
    """
    経験測度 y に対する相互作用ドリフト

    exclude_self=True: (1/(N-1)) Σ_{j≠i} h_t(x^i - y^j)（x と y は同じ粒子系）
    exclude_self=False: (1/N) Σ_j h_t(x^i - y^j)
    """
    n_x, d = x.shape
    n_y = y.shape[0]
    if kernel.kind == "zero" or (exclude_self and n_y < 2):
        return np.zeros_like(x)
    if exclude_self and n_x != n_y:
        raise OutOfRange("exclude_self には粒子数が一致するフローが必要です")
    norm = 1.0 / (n_y - 1 if exclude_self else n_y)

    def chunk(rows: slice) -> np.ndarray:
        diffs, diagonal = pair_differences(x, y, rows, exclude_self)
        h = kernel_eval(kernel, t, diffs)
        if diagonal is not None:
            h[diagonal] = 0.0
        return h.sum(axis=1) * norm

    return map_particle_chunks(chunk, n_x, chunk=pair_chunk_rows(n_y, d))


def _euler_positions(
    coeffs: CoefficientSet,
    t: float,
    dt: float,
    x: np.ndarray,
    interaction: np.ndarray,
    dw: np.ndarray,
) -> np.ndarray:
    drift = coeffs.drift(t, x) + interaction
    noise = np.einsum("nij,nj->ni", coeffs.diffusion(t, x), dw)
    return x + drift * dt + noise


def _check_step(ensemble: Ensemble, grid: TimeGrid, m: int) -> None:
    if not 0 <= m < grid.M:
        raise OutOfRange(f"ステップ番号 m={m} が範囲 [0, {grid.M}) の外です")
    if ensemble.step_index != m:
        raise OutOfRange(f"アンサンブルはステップ {ensemble.step_index} にあります（要求: {m}）")


def _notify(observers: Sequence[StepObserver], view: StepView) -> None:
    for observer in observers:
        observer.observe(view)


def step_mv(
    ensemble: Ensemble,
    coeffs: CoefficientSet,
    kernel: KernelSpec,
    grid: TimeGrid,
    m: int,
    *,
    observers: Sequence[StepObserver] = (),
) -> Ensemble:
    """
    相互作用粒子系を1ステップ進める（ensemble を更新して返す）

    X^i ← X^i + [b_t(X^i) + B̂^i] Δt + σ_t(X^i) ΔW^i、
    B̂^i = (1/(N-1)) Σ_{j≠i} h_t(X^i - X^j)。カーネルの時刻は m=0 のみ t_1 を使う。
    変分を保持している場合は同じ増分で v も更新する。

    Raises:
        NonFinite: 更新後に NaN/Inf が含まれる場合（ステップ番号付き）
        SingularEvaluation: δ=0 の coulomb で2粒子が一致した場合
    """
    _check_step(ensemble, grid, m)
    t = float(grid.nodes[m])
    dt = grid.dt(m)
    kernel_t = grid.kernel_time(m)
    x = ensemble.positions
    dw = ensemble.increments(m, dt)
    interaction = interaction_drift(kernel, kernel_t, x, x, exclude_self=True)

    new_v = None
    measure = None
    if ensemble.variations is not None:
        lin, measure = interaction_linearization(
            kernel,
            kernel_t,
            x,
            ensemble.variations,
            with_measure_term=_needs_measure_term(observers),
        )
        new_v = advance_variation(coeffs, t, dt, x, ensemble.variations, dw, lin)

    _notify(
        observers,
        StepView(
            m=m,
            t=t,
            dt=dt,
            kernel_t=kernel_t,
            positions=x,
            increments=dw,
            interaction=interaction,
            variations=ensemble.variations,
            measure_term=measure,
        ),
    )

    ensemble.positions = _euler_positions(coeffs, t, dt, x, interaction, dw)
    if new_v is not None:
        ensemble.variations = new_v
    ensemble.step_index = m + 1
    ensemble.check_finite(m + 1)
    return ensemble


def _finalize(observers: Sequence[StepObserver], ensemble: Ensemble, grid: TimeGrid) -> None:
    for observer in observers:
        observer.finalize(ensemble, grid.T)


def simulate_mv(
    law: InitialLaw,
    coeffs: CoefficientSet,
    kernel: KernelSpec,
    grid: TimeGrid,
    N: int,
    seed: int,
    record_flow: bool = False,
    *,
    x0: np.ndarray | None = None,
    stream_ids: np.ndarray | None = None,
    phi: PhiSpec | None = None,
    observers: Sequence[StepObserver] = (),
    retain_increments: bool = False,
) -> tuple[Ensemble, MeasureFlow | None]:
    """
    相互作用粒子系を [0, T] で時間発展させる

    Args:
        law: 初期分布（x0 を指定した場合は使わない）
        coeffs: ドリフト・拡散係数
        kernel: 相互作用カーネル（δ 解決済み）
        grid: 時間グリッド
        N: 粒子数
        seed: 乱数 seed
        record_flow: 各節点の位置を MeasureFlow として記録する
        x0: 初期位置（有限差分オラクルの摂動用）
        stream_ids: 粒子 i が使う乱数ストリーム番号
        phi: 指定した場合、変分 v₀ = φ(X₀) も同じループで発展させる
        observers: 各ステップの状態を受け取るオブザーバ
        retain_increments: ブラウン増分を brownian_log に保持する

    Returns:
        (時刻 T のアンサンブル, MeasureFlow または None)
    """
    ensemble = init_ensemble(
        law,
        N,
        coeffs.dim,
        seed,
        positions=x0,
        stream_ids=stream_ids,
        retain_increments=retain_increments,
    )
    if phi is not None:
        ensemble.variations = phi.apply(ensemble.positions)
        ensemble.check_finite(0)
    snapshots = [ensemble.positions.copy()] if record_flow else None
    for m in range(grid.M):
        step_mv(ensemble, coeffs, kernel, grid, m, observers=observers)
        if snapshots is not None:
            snapshots.append(ensemble.positions.copy())
    _finalize(observers, ensemble, grid)
    flow = MeasureFlow(grid=grid, snapshots=snapshots) if snapshots is not None else None
    return ensemble, flow


def simulate_decoupled(
    x0: np.ndarray,
    flow: MeasureFlow,
    coeffs: CoefficientSet,
    kernel: KernelSpec,
    seed: int,
    *,
    grid: TimeGrid | None = None,
    stream_ids: np.ndarray | None = None,
    with_jacobian: bool = False,
    exclude_self: bool = False,
    observers: Sequence[StepObserver] = (),
    retain_increments: bool = False,
) -> Ensemble:
    """
    凍結した測度フローのもとで分離SDEを時間発展させる

    dX = [b_t(X) + (1/N) Σ_j h_t(X - Y^j_t)] dt + σ_t(X) dW（Y は flow のスナップショット）。
    exclude_self=True では粒子 i はフローの粒子 i を除いて 1/(N-1) で平均する
    （自分自身の記録フローで駆動すると simulate_mv と一致する）。

    Raises:
        InvalidGrid: grid が flow のグリッドと一致しない場合
    """
    if grid is None:
        grid = flow.grid
    elif not grid.same_as(flow.grid):
        raise InvalidGrid("分離SDEのグリッドが測度フローのグリッドと一致しません")
    x0 = np.asarray(x0, dtype=float)
    ensemble = init_ensemble(
        InitialLaw(),
        x0.shape[0],
        coeffs.dim,
        seed,
        positions=x0,
        stream_ids=stream_ids,
        with_jacobians=with_jacobian,
        retain_increments=retain_increments,
    )
    for m in range(grid.M):
        t = float(grid.nodes[m])
        dt = grid.dt(m)
        kernel_t = grid.kernel_time(m)
        x = ensemble.positions
        snapshot = flow.snapshots[m]
        dw = ensemble.increments(m, dt)
        interaction = interaction_drift(kernel, kernel_t, x, snapshot, exclude_self=exclude_self)
        new_jac = None
        if ensemble.jacobians is not None:
            gradient = frozen_gradient(kernel, kernel_t, x, snapshot, exclude_self=exclude_self)
            new_jac = advance_jacobian(coeffs, t, dt, x, ensemble.jacobians, dw, gradient)
        _notify(
            observers,
            StepView(
                m=m,
                t=t,
                dt=dt,
                kernel_t=kernel_t,
                positions=x,
                increments=dw,
                interaction=interaction,
                jacobians=ensemble.jacobians,
            ),
        )
        ensemble.positions = _euler_positions(coeffs, t, dt, x, interaction, dw)
        if new_jac is not None:
            ensemble.jacobians = new_jac
        ensemble.step_index = m + 1
        ensemble.check_finite(m + 1)
    _finalize(observers, ensemble, grid)
    return ensemble
