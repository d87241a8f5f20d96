"""
推定量の検証用オラクルと理論評価の診断

- 共通乱数（CRN）による有限差分で D_φ P_t f(μ) を推定する
- 2つの測度フローの間の Girsanov 重みとその ε 依存性を測る
- カーネル勾配・カーネル差分の時間スケーリングを理論指数と比べる
- 変分過程と差分商の一致を確かめる

摂動系は初期位置 X₀ + εφ(X₀) から、基準系と同じ seed・同じストリームで走らせる。
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .ensemble import Ensemble, init_ensemble
from .errors import NonFinite, OutOfRange
from .experiment import ExperimentSetup
from .params import CoefficientSet, KernelSpec, kernel_eval, kernel_grad, zeta
from .simulator import (
    MeasureFlow,
    PathLog,
    StepObserver,
    StepView,
    interaction_drift,
    mean_and_se,
    simulate_mv,
)
from .variation import PhiSpec

ZMode = Literal["paired", "fixed"]

# 差分商と変分の差がこの値（×(1 + max|φ(X₀)|)）以下なら丸め誤差のみとみなす
ROUNDING_FLOOR = 1e-9


# ---------------------------------------------------------------------------
# 共通の道具
# ---------------------------------------------------------------------------


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """
    log y を log x に最小二乗（重みなし）で当てはめた傾き

    Raises:
        OutOfRange: 点が3個未満、または正でない値を含む場合
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise OutOfRange("傾きの当てはめには3点以上が必要です")
    if np.any(x <= 0) or np.any(y <= 0):
        raise OutOfRange("対数をとる値はすべて正である必要があります")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def _slope_or_nan(xs: Sequence[float], ys: Sequence[float]) -> float:
    points = [(x, y) for x, y in zip(xs, ys, strict=True) if y > 0]
    if len(points) < 3:
        return math.nan
    return fit_loglog_slope([x for x, _ in points], [y for _, y in points])


def _power_mean(samples: np.ndarray, q: float) -> tuple[float, float]:
    """(mean Y)^{1/q}（Y = samples^q）とデルタ法による標準誤差"""
    mean, se = mean_and_se(samples**q)
    if mean <= 0.0:
        return 0.0, 0.0
    value = mean ** (1.0 / q)
    return value, value * se / (q * mean)


def initial_positions(setup: ExperimentSetup) -> np.ndarray:
    """基準系の初期位置 X₀（simulate_mv と同じストリームから）"""
    return init_ensemble(
        setup.law, setup.N, setup.dim, setup.seed, stream_ids=setup.stream_ids
    ).positions


def _run(
    setup: ExperimentSetup,
    x0: np.ndarray,
    *,
    record_flow: bool = False,
    phi: PhiSpec | None = None,
    observers: Sequence[StepObserver] = (),
) -> tuple[Ensemble, MeasureFlow | None]:
    return simulate_mv(
        setup.law,
        setup.coeffs,
        setup.kernel,
        setup.grid,
        setup.N,
        setup.seed,
        record_flow,
        x0=x0,
        stream_ids=setup.stream_ids,
        phi=phi,
        observers=observers,
    )


def _perturb(x0: np.ndarray, phi: PhiSpec, epsilon: float) -> np.ndarray:
    return x0 + epsilon * phi.apply(x0)


def _probe_nodes(setup: ExperimentSetup, probe_times: Sequence[float] | None, t_min: float, n_probe: int) -> list[int]:
    """診断時刻に最も近い節点（t > 0、重複なし、昇順）"""
    nodes = setup.grid.nodes
    times = (
        np.asarray(probe_times, dtype=float)
        if probe_times is not None
        else np.geomspace(t_min, setup.T, n_probe)
    )
    chosen = sorted({1 + int(np.argmin(np.abs(nodes[1:] - t))) for t in times})
    return chosen


def _paired(x: np.ndarray) -> np.ndarray:
    """粒子 i に粒子 (i + N/2) mod N を対応させる"""
    n = x.shape[0]
    return x[(np.arange(n) + n // 2) % n]


# ---------------------------------------------------------------------------
# 有限差分オラクル
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FDResult:
    """差分商 (mean f(X_T^ε) - mean f(X_T))/ε とその標準誤差"""

    epsilon: float
    estimate: float
    std_error: float


def fd_family(
    setup: ExperimentSetup, epsilons: Sequence[float], *, phi: PhiSpec | None = None
) -> list[FDResult]:
    """基準系を1回だけ走らせ、各 ε の CRN 差分商を返す"""
    if any(not eps > 0 for eps in epsilons):
        raise OutOfRange("ε は正である必要があります")
    phi = setup.phi if phi is None else phi
    x0 = initial_positions(setup)
    base, _ = _run(setup, x0)
    f_base = setup.f.evaluate(base.positions)
    results = []
    for epsilon in epsilons:
        perturbed, _ = _run(setup, _perturb(x0, phi, epsilon))
        quotient = (setup.f.evaluate(perturbed.positions) - f_base) / epsilon
        estimate, se = mean_and_se(quotient)
        results.append(FDResult(epsilon=float(epsilon), estimate=estimate, std_error=se))
    return results


def fd_intrinsic_derivative(
    setup: ExperimentSetup, epsilon: float, *, phi: PhiSpec | None = None
) -> FDResult:
    """
    初期位置を εφ(X₀) だけずらした系との CRN 差分商で D_φ P_T f(μ) を推定する

    Raises:
        OutOfRange: ε ≤ 0 の場合
    """
    return fd_family(setup, [epsilon], phi=phi)[0]


def halving_increments(results: Sequence[FDResult]) -> list[tuple[float, float]]:
    """隣り合う ε の差分商の差 |FD(ε) - FD(ε')|（ε は大きい方）"""
    ordered = sorted(results, key=lambda r: r.epsilon, reverse=True)
    return [
        (a.epsilon, abs(a.estimate - b.estimate)) for a, b in zip(ordered, ordered[1:], strict=False)
    ]


# ---------------------------------------------------------------------------
# Girsanov 重み
# ---------------------------------------------------------------------------


@dataclass
class GirsanovAccumulator:
    """
    摂動系の経路に沿って log R = Σ⟨Ξ, ΔW⟩ - ½Σ|Ξ|²Δt を積む

    Ξ = ζᵀ[B̂(X^ε; μ) - B̂(X^ε; μ^ε)]。どちらの経験測度も粒子 i 自身を除いて平均する。
    """

    base_flow: MeasureFlow
    kernel: KernelSpec
    coeffs: CoefficientSet
    stochastic_integral: np.ndarray | None = None
    quadratic: np.ndarray | None = None

    def observe(self, view: StepView) -> None:
        x = view.positions
        if self.stochastic_integral is None:
            self.stochastic_integral = np.zeros(x.shape[0])
            self.quadratic = np.zeros(x.shape[0])
        base_drift = interaction_drift(
            self.kernel, view.kernel_t, x, self.base_flow.snapshots[view.m], exclude_self=True
        )
        xi = np.einsum("nij,ni->nj", zeta(self.coeffs, view.t, x), base_drift - view.interaction)
        self.stochastic_integral += np.einsum("ni,ni->n", xi, view.increments)
        self.quadratic += 0.5 * np.sum(xi * xi, axis=-1) * view.dt

    def finalize(self, ensemble: Ensemble, t: float) -> None:
        if self.stochastic_integral is None:
            self.stochastic_integral = np.zeros(ensemble.N)
            self.quadratic = np.zeros(ensemble.N)


@dataclass
class GirsanovRecord:
    """1つの ε に対する経路ごとの Girsanov 重み"""

    epsilon: float
    stochastic_integral: np.ndarray
    quadratic: np.ndarray
    weights: np.ndarray
    mean_weight: float
    std_error: float

    def abs_deviation(self, moment: float = 1.0) -> tuple[float, float]:
        """E|R - 1|^n の推定値と標準誤差"""
        return mean_and_se(np.abs(self.weights - 1.0) ** moment)


def girsanov_weight(
    setup: ExperimentSetup,
    epsilon: float,
    *,
    phi: PhiSpec | None = None,
    base_flow: MeasureFlow | None = None,
) -> GirsanovRecord:
    """
    基準系と摂動系の記録フローから Girsanov 重み R_T^ε を計算する

    Args:
        setup: 実験設定
        epsilon: 摂動幅（0 を許す）
        phi: 摂動方向（省略時は setup.phi）
        base_flow: 基準系の記録済みフロー（省略時はここで走らせる）

    Raises:
        NonFinite: 重みが有限でない、または正でない場合
    """
    if not epsilon >= 0:
        raise OutOfRange(f"ε は非負である必要があります: {epsilon}")
    phi = setup.phi if phi is None else phi
    x0 = initial_positions(setup)
    if base_flow is None:
        _, base_flow = _run(setup, x0, record_flow=True)
    assert base_flow is not None
    accumulator = GirsanovAccumulator(base_flow, setup.kernel, setup.coeffs)
    _run(setup, _perturb(x0, phi, epsilon), observers=[accumulator])
    assert accumulator.stochastic_integral is not None and accumulator.quadratic is not None
    log_weight = accumulator.stochastic_integral - accumulator.quadratic
    weights = np.exp(log_weight)
    if not (np.all(np.isfinite(log_weight)) and np.all(weights > 0)):
        raise NonFinite("girsanov_weight")
    mean, se = mean_and_se(weights)
    return GirsanovRecord(
        epsilon=float(epsilon),
        stochastic_integral=accumulator.stochastic_integral,
        quadratic=accumulator.quadratic,
        weights=weights,
        mean_weight=mean,
        std_error=se,
    )


@dataclass
class GirsanovOrderReport:
    """E|R-1|^n の ε 依存性"""

    records: list[GirsanovRecord]
    moment: float
    mean_abs_dev: list[float]
    abs_dev_se: list[float]
    slope: float
    degenerate: bool

    @property
    def order(self) -> float:
        """傾きを n で割った次数（n=1 では傾きそのもの）"""
        return self.slope / self.moment

    def rows(self) -> list[tuple[float, float, float, float]]:
        return [
            (r.epsilon, r.mean_weight, dev, r.std_error)
            for r, dev in zip(self.records, self.mean_abs_dev, strict=True)
        ]


def girsanov_order_check(
    setup: ExperimentSetup,
    epsilons: Sequence[float],
    *,
    phi: PhiSpec | None = None,
    moment: float = 1.0,
) -> GirsanovOrderReport:
    """
    各 ε の Girsanov 重みを計算し、log E|R-1|^n を log ε に当てはめる

    基準系のフローは全 ε で共有する。E|R-1| がすべて0なら degenerate とする。

    Raises:
        OutOfRange: ε が3個未満の場合
    """
    if len(epsilons) < 3:
        raise OutOfRange("girsanov_order_check には3個以上の ε が必要です")
    x0 = initial_positions(setup)
    _, base_flow = _run(setup, x0, record_flow=True)
    records = [girsanov_weight(setup, eps, phi=phi, base_flow=base_flow) for eps in epsilons]
    deviations = [record.abs_deviation(moment) for record in records]
    values = [value for value, _ in deviations]
    degenerate = all(value == 0.0 for value in values)
    return GirsanovOrderReport(
        records=records,
        moment=float(moment),
        mean_abs_dev=values,
        abs_dev_se=[se for _, se in deviations],
        slope=math.nan if degenerate else _slope_or_nan(list(epsilons), values),
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# スケーリング診断
# ---------------------------------------------------------------------------


@dataclass
class ScalingReport:
    """M(t) = (mean ‖∇h_t(z - X_t)‖^{p/(p-1)})^{(p-1)/p} の時間推移"""

    times: list[float]
    values: list[float]
    std_errors: list[float]
    theoretical_exponent: float
    slope: float
    z_mode: ZMode
    lower_bound: bool = False

    @property
    def degenerate(self) -> bool:
        return all(value == 0.0 for value in self.values)

    @property
    def bound_constant(self) -> float:
        """M(t) ≤ C t^{exponent} を全点で満たす最小の C"""
        return max(
            (v / t**self.theoretical_exponent for t, v in zip(self.times, self.values, strict=True)),
            default=0.0,
        )

    def rows(self) -> list[tuple[float, float, float, float]]:
        return [
            (t, v, se, self.theoretical_exponent)
            for t, v, se in zip(self.times, self.values, self.std_errors, strict=True)
        ]


def _z_grid(x: np.ndarray) -> np.ndarray:
    """粒子の平均を中心に ±1 標準偏差の点（d ≤ 3 は格子、それ以上は座標軸上）"""
    n, d = x.shape
    center = x.mean(axis=0)
    spread = x.std(axis=0)
    spread = np.where(spread > 0, spread, 1.0)
    if d <= 3:
        offsets = np.array(np.meshgrid(*[[-1.0, 0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    else:
        eye = np.eye(d)
        offsets = np.vstack([np.zeros((1, d)), eye, -eye])
    return center + offsets * spread


def kernel_scaling_probe(
    setup: ExperimentSetup,
    p: float,
    z_mode: ZMode = "paired",
    *,
    probe_times: Sequence[float] | None = None,
    t_min: float = 0.01,
    n_probe: int = 8,
) -> ScalingReport:
    """
    カーネル勾配のモーメント M(t) を診断時刻ごとに推定し、理論指数 κ - dp/(2k'(p-1)) と比べる

    z_mode=paired では z を独立な粒子とし、fixed では小さな z グリッド上の最大値をとる
    （有限グリッドの最大値は上限の下界でしかない）。

    Raises:
        OutOfRange: 初期分布が gaussian でない、p ≤ 1、または N < 2 の場合
        SingularEvaluation: δ=0 の coulomb で分離0を評価した場合
    """
    if setup.law.kind != "gaussian":
        raise OutOfRange("スケーリング診断には密度をもつ gaussian 初期分布が必要です")
    if not p > 1:
        raise OutOfRange(f"p は1より大きい必要があります: p={p}")
    if setup.N < 2:
        raise OutOfRange("スケーリング診断には2粒子以上が必要です")
    q = p / (p - 1.0)
    _, flow = _run(setup, initial_positions(setup), record_flow=True)
    assert flow is not None

    times, values, errors = [], [], []
    for m in _probe_nodes(setup, probe_times, t_min, n_probe):
        t = float(setup.grid.nodes[m])
        x = flow.snapshots[m]
        if z_mode == "paired":
            norms = np.linalg.norm(kernel_grad(setup.kernel, t, _paired(x) - x), ord=2, axis=(-2, -1))
            value, se = _power_mean(norms, q)
        else:
            candidates = [
                _power_mean(
                    np.linalg.norm(kernel_grad(setup.kernel, t, z - x), ord=2, axis=(-2, -1)), q
                )
                for z in _z_grid(x)
            ]
            value, se = max(candidates, key=lambda pair: pair[0])
        times.append(t)
        values.append(value)
        errors.append(se)

    exponent = setup.kernel.kappa
    if math.isfinite(setup.k_prime):
        exponent -= setup.dim * p / (2.0 * setup.k_prime * (p - 1.0))
    return ScalingReport(
        times=times,
        values=values,
        std_errors=errors,
        theoretical_exponent=exponent,
        slope=_slope_or_nan(times, values),
        z_mode=z_mode,
        lower_bound=z_mode == "fixed",
    )


def theta_interval(k_prime: float, p: float) -> tuple[float, float]:
    """カーネル差分診断の θ の許容区間 (1, min(2, k'p/(k'+p)))"""
    upper = p if math.isinf(k_prime) else k_prime * p / (k_prime + p)
    return 1.0, min(2.0, upper)


@dataclass
class KernelDifferenceReport:
    """(mean |h_s(z - X_s) - h_s(z - X_s^ε)|^θ)^{1/θ}/ε の (ε, s) 表"""

    theta: float
    theoretical_exponent: float
    rows_by_epsilon: dict[float, list[tuple[float, float, float]]] = field(default_factory=dict)

    def slope(self, epsilon: float) -> float:
        rows = self.rows_by_epsilon[epsilon]
        return _slope_or_nan([t for t, _, _ in rows], [v for _, v, _ in rows])

    def rows(self) -> list[tuple[float, float, float, float, float]]:
        return [
            (eps, t, v, se, self.theoretical_exponent)
            for eps, rows in self.rows_by_epsilon.items()
            for t, v, se in rows
        ]


def kernel_difference_probe(
    setup: ExperimentSetup,
    epsilons: Sequence[float],
    theta: float,
    *,
    phi: PhiSpec | None = None,
    probe_times: Sequence[float] | None = None,
    t_min: float = 0.01,
    n_probe: int = 8,
) -> KernelDifferenceReport:
    """
    摂動による相互作用の変化量を時刻ごとに測り、理論指数 κ - d/(2k') と比べる

    z は基準系の独立な粒子とする。

    Raises:
        OutOfRange: θ が (1, min(2, k'p/(k'+p))) の外、ε ≤ 0、または N < 2 の場合
    """
    low, high = theta_interval(setup.k_prime, setup.p)
    if not low < theta < high:
        raise OutOfRange(f"θ は ({low:g}, {high:g}) にある必要があります: θ={theta}")
    if any(not eps > 0 for eps in epsilons):
        raise OutOfRange("ε は正である必要があります")
    if setup.N < 2:
        raise OutOfRange("カーネル差分診断には2粒子以上が必要です")
    phi = setup.phi if phi is None else phi
    x0 = initial_positions(setup)
    _, base_flow = _run(setup, x0, record_flow=True)
    assert base_flow is not None
    nodes = _probe_nodes(setup, probe_times, t_min, n_probe)

    exponent = setup.kernel.kappa
    if math.isfinite(setup.k_prime):
        exponent -= setup.dim / (2.0 * setup.k_prime)
    report = KernelDifferenceReport(theta=float(theta), theoretical_exponent=exponent)
    for epsilon in epsilons:
        _, flow = _run(setup, _perturb(x0, phi, epsilon), record_flow=True)
        assert flow is not None
        rows = []
        for m in nodes:
            s = float(setup.grid.nodes[m])
            x = base_flow.snapshots[m]
            z = _paired(x)
            change = kernel_eval(setup.kernel, s, z - x) - kernel_eval(
                setup.kernel, s, z - flow.snapshots[m]
            )
            value, se = _power_mean(np.linalg.norm(change, axis=-1), theta)
            rows.append((s, value / epsilon, se / epsilon))
        report.rows_by_epsilon[float(epsilon)] = rows
    return report


# ---------------------------------------------------------------------------
# 変分と差分商の一致
# ---------------------------------------------------------------------------


@dataclass
class SupDeviation:
    """sup_m |(X^ε_m - X_m)/ε - v_m| を粒子ごとに追跡するオブザーバ"""

    base_positions: list[np.ndarray]
    base_variations: list[np.ndarray]
    epsilon: float
    sup: np.ndarray | None = None

    def _update(self, m: int, x: np.ndarray) -> None:
        deviation = np.linalg.norm(
            (x - self.base_positions[m]) / self.epsilon - self.base_variations[m], axis=-1
        )
        self.sup = deviation if self.sup is None else np.maximum(self.sup, deviation)

    def observe(self, view: StepView) -> None:
        self._update(view.m, view.positions)

    def finalize(self, ensemble: Ensemble, t: float) -> None:
        self._update(len(self.base_positions) - 1, ensemble.positions)


@dataclass
class VariationCheckReport:
    """ε ごとの mean_i sup_m |(X^ε - X)/ε - v|^p"""

    p: float
    epsilons: list[float]
    values: list[float]
    std_errors: list[float]
    direction_scale: float = 0.0

    @property
    def degenerate(self) -> bool:
        """
        差分商が変分と丸め誤差の範囲で一致する（摂動が系全体の平行移動になる場合など）

        このとき値は 1/ε で増える丸め誤差だけなので、単調性や次数は意味をもたない。
        """
        floor = (ROUNDING_FLOOR * (1.0 + self.direction_scale)) ** self.p
        return all(value <= floor for value in self.values)

    @property
    def order(self) -> float:
        """log(値)/p を log ε に当てはめた次数"""
        return _slope_or_nan(self.epsilons, self.values) / self.p

    @property
    def monotone(self) -> bool:
        """ε を小さくすると値が減る（1 SE の余裕を許す）"""
        pairs = sorted(zip(self.epsilons, self.values, self.std_errors, strict=True), reverse=True)
        return all(b[1] < a[1] + a[2] for a, b in zip(pairs, pairs[1:], strict=False))

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.epsilons, self.values, self.std_errors, strict=True))


def fd_variation_check(
    setup: ExperimentSetup,
    epsilons: Sequence[float],
    p: float,
    *,
    phi: PhiSpec | None = None,
    base_observers: Sequence[StepObserver] = (),
) -> VariationCheckReport:
    """
    変分 v と CRN 差分商 (X^ε - X)/ε の経路上の最大誤差を ε ごとに測る

    Args:
        base_observers: 基準系（変分付き）の実行に追加するオブザーバ
    """
    if any(not eps > 0 for eps in epsilons):
        raise OutOfRange("ε は正である必要があります")
    if not p > 0:
        raise OutOfRange(f"p は正である必要があります: p={p}")
    phi = setup.phi if phi is None else phi
    x0 = initial_positions(setup)
    direction_scale = float(np.max(np.abs(phi.apply(x0)), initial=0.0))
    log = PathLog(record_increments=False, record_variations=True)
    _run(setup, x0, phi=phi, observers=[log, *base_observers])
    assert log.final is not None and log.final_variations is not None
    positions = [*log.positions, log.final]
    variations = [*log.variations, log.final_variations]

    values, errors = [], []
    for epsilon in epsilons:
        tracker = SupDeviation(positions, variations, float(epsilon))
        _run(setup, _perturb(x0, phi, epsilon), observers=[tracker])
        assert tracker.sup is not None
        value, se = mean_and_se(tracker.sup**p)
        values.append(value)
        errors.append(se)
    return VariationCheckReport(
        p=float(p),
        epsilons=[float(e) for e in epsilons],
        values=values,
        std_errors=errors,
        direction_scale=direction_scale,
    )
