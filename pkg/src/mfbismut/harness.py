"""
サブコマンドの実行と成果物の書き出し

各サブコマンドは決められたCSVを出力ディレクトリに書き、実行中の判定をすべて記録する。
判定が1件でも失敗すれば failures.csv を書いて終了ステータス1を返す。
"""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from . import csv_io
from .bismut import BismutEstimate, intrinsic_derivative
from .config import RunConfig, check_assumptions
from .errors import ConfigValidationError
from .experiment import ExperimentSetup, build_setup
from .oracles import (
    fd_family,
    girsanov_order_check,
    halving_increments,
    kernel_difference_probe,
    kernel_scaling_probe,
    theta_interval,
)
from .oracles import fd_variation_check as run_fd_variation_check
from .params import check_drift_jacobian
from .simulator import estimate_ptf, simulate_mv
from .variation import VariationHistory, moment_probe

SUBCOMMANDS = (
    "validate",
    "simulate",
    "bismut",
    "fd-check",
    "girsanov-check",
    "scaling-probe",
    "varcheck",
    "kernel-diff-probe",
    "all",
)

# 判定の許容幅
SE_MULTIPLIER = 3.0
SLOPE_TOLERANCE = 0.3
GIRSANOV_ORDER_RANGE = (0.8, 1.2)
DRIFT_JACOBIAN_TOLERANCE = 1e-5


@dataclass
class Harness:
    """1回の CLI 実行の状態（設定・出力先・判定結果）"""

    config: RunConfig
    out_dir: Path
    verbose: bool = False
    failures: list[tuple[str, str]] = field(default_factory=list)
    written: list[Path] = field(default_factory=list)
    _setup: ExperimentSetup | None = None
    _estimate: BismutEstimate | None = None

    @property
    def digest(self) -> str:
        return self.config.digest()

    @property
    def setup(self) -> ExperimentSetup:
        if self._setup is None:
            self._setup = build_setup(self.config)
            grid = self._setup.grid
            self._log(
                f"グリッド: {grid.kind} (M={grid.M}, γ={grid.gamma:g}), "
                f"カーネル: {self._setup.kernel.kind} (δ={self._setup.kernel.delta:g})",
                "DEBUG",
            )
        return self._setup

    def _log(self, message: str, level: str = "INFO"):
        """ログメッセージを出力

        Args:
            message: ログメッセージ
            level: ログレベル (INFO, WARNING, ERROR, DEBUG)
        """
        if level == "DEBUG" and not self.verbose:
            return
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        print(f"[{timestamp}] [{level}] {message}")

    def check(self, name: str, passed: bool, detail: str) -> bool:
        """判定を記録して ✓/✗ を表示する"""
        mark = "✓" if passed else "✗"
        print(f"{mark} {name}: {detail}")
        if not passed:
            self.failures.append((name, detail))
        return passed

    def write(self, name: str, header: Sequence[str], rows) -> Path:
        path = csv_io.write_csv(self.out_dir / name, header, rows, self.digest)
        self.written.append(path)
        self._log(f"書き出し: {path}", "DEBUG")
        return path

    # -----------------------------------------------------------------------
    # サブコマンド
    # -----------------------------------------------------------------------

    def validate(self) -> None:
        report = self.config.validation_report()
        rows = []
        for check in report.checks:
            self.check(check.name, check.passed, check.detail)
            rows.append((check.name, check.passed, check.margin, check.detail))
        error = check_drift_jacobian(
            self.setup.coeffs, seed=self.config.sim.seed, T=self.config.model.T
        )
        passed = error <= DRIFT_JACOBIAN_TOLERANCE
        detail = f"最大相対誤差 {error:.3e}"
        self.check("drift_jacobian", passed, detail)
        rows.append(("drift_jacobian", passed, DRIFT_JACOBIAN_TOLERANCE - error, detail))
        self._log(f"p の許容区間: {report.p_interval}")
        self.write("validation.csv", ["check", "passed", "margin", "detail"], rows)

    def simulate(self) -> None:
        setup = self.setup
        self._log(f"相互作用粒子系を実行中 (N={setup.N}, M={setup.grid.M})")
        ensemble, flow = simulate_mv(
            setup.law,
            setup.coeffs,
            setup.kernel,
            setup.grid,
            setup.N,
            setup.seed,
            record_flow=self.config.sim.record_flow,
        )
        path = csv_io.write_positions_csv(self.out_dir / "positions.csv", ensemble.positions, self.digest)
        self.written.append(path)
        if flow is not None:
            self.written.extend(csv_io.write_flow(self.out_dir / "flow", flow, self.digest))
        mean, se = estimate_ptf(ensemble, setup.f)
        self._log(f"P_T f(μ) = {mean:.6g} ± {se:.2g}")

    def _bismut_estimate(self) -> BismutEstimate:
        if self._estimate is None:
            setup = self.setup
            self._log(f"Bismut 型推定量を計算中 (N={setup.N}, M={setup.grid.M}, β={setup.beta})")
            self._estimate = intrinsic_derivative(setup)
        return self._estimate

    def bismut(self) -> None:
        estimate = self._bismut_estimate()
        for quantity, value, se in estimate.rows():
            self._log(f"{quantity} = {value:.6g} ± {se:.2g}")
        self.write(
            "bismut.csv",
            ["quantity", "value", "std_error", "n_particles", "n_steps", "seed"],
            [
                (quantity, value, se, estimate.n_particles, estimate.n_steps, estimate.seed)
                for quantity, value, se in estimate.rows()
            ],
        )
        if estimate.gradient_bound_ratio is not None:
            self._log(f"|D_φ P_t f|·√t/‖f‖_∞ = {estimate.gradient_bound_ratio:.4g}")
        if estimate.moment_bound_ratio is not None:
            self._log(f"|D_φ P_t f|·√t/(‖f‖_q‖η‖_p) = {estimate.moment_bound_ratio:.4g}")
        if self.setup.kernel.kind == "zero":
            self.check("term2 = 0", estimate.term2 == 0.0, f"term2={estimate.term2!r}")
        expected = self.config.estimator.expected_total
        if expected is not None:
            gap = abs(estimate.total - expected)
            self.check(
                "bismut ≈ 既知の値",
                gap <= SE_MULTIPLIER * estimate.se_total,
                f"|{estimate.total:.6g} - {expected:.6g}| = {gap:.3g}, 3·SE = {SE_MULTIPLIER * estimate.se_total:.3g}",
            )

    def fd_check(self) -> None:
        setup = self.setup
        oracle = self.config.oracle
        epsilons = sorted({*oracle.epsilons, oracle.fd_epsilon}, reverse=True)
        self._log(f"有限差分オラクルを実行中 (ε = {', '.join(f'{e:g}' for e in epsilons)})")
        results = fd_family(setup, epsilons)
        self.write("fd.csv", ["epsilon", "estimate", "std_error"], [
            (r.epsilon, r.estimate, r.std_error) for r in results
        ])
        self.bismut()
        estimate = self._bismut_estimate()
        fd = next(r for r in results if r.epsilon == oracle.fd_epsilon)
        allowance = dict(halving_increments(results)).get(fd.epsilon, 0.0)
        combined = math.sqrt(estimate.se_total**2 + fd.std_error**2)
        gap = abs(estimate.total - fd.estimate)
        passed = gap <= SE_MULTIPLIER * combined + allowance
        print(f"verdict: {'PASS' if passed else 'FAIL'}")
        self.check(
            "Bismut ≈ FD",
            passed,
            f"|{estimate.total:.6g} - {fd.estimate:.6g}| = {gap:.3g}, "
            f"3·SE = {SE_MULTIPLIER * combined:.3g}, 偏りの許容 = {allowance:.3g}",
        )

    def girsanov_check(self) -> None:
        oracle = self.config.oracle
        self._log("Girsanov 重みを計算中")
        report = girsanov_order_check(self.setup, oracle.epsilons, moment=oracle.girsanov_moment)
        self.write(
            "girsanov.csv", ["epsilon", "mean_weight", "mean_abs_dev", "std_error"], report.rows()
        )
        for record in report.records:
            gap = abs(record.mean_weight - 1.0)
            self.check(
                f"E R = 1 (ε={record.epsilon:g})",
                gap <= SE_MULTIPLIER * record.std_error,
                f"平均 {record.mean_weight:.6g}, SE {record.std_error:.3g}",
            )
        if report.degenerate:
            self._log("E|R-1| はすべての ε で厳密に0です（ドリフト差なし）")
            return
        low, high = GIRSANOV_ORDER_RANGE
        self.check(
            "E|R-1| の次数",
            low <= report.order <= high,
            f"次数 {report.order:.3f}（許容 [{low}, {high}]）",
        )

    def scaling_probe(self) -> None:
        oracle = self.config.oracle
        report = kernel_scaling_probe(
            self.setup,
            oracle.p,
            oracle.z_mode,
            probe_times=oracle.probe_times,
            t_min=oracle.t_min,
            n_probe=oracle.n_probe,
        )
        self.write("scaling.csv", ["t", "value", "std_error", "theoretical_exponent"], report.rows())
        if report.lower_bound:
            self._log("fixed モードの値は z グリッド上の最大値で、上限の下界です", "WARNING")
        if report.degenerate:
            self._log("M(t) はすべて0です（相互作用なし）")
            return
        self._log(f"C = {report.bound_constant:.4g}（M(t) ≤ C t^{report.theoretical_exponent:.3g}）")
        self.check(
            "スケーリング指数",
            report.slope >= report.theoretical_exponent - SLOPE_TOLERANCE,
            f"傾き {report.slope:.3f}, 理論指数 {report.theoretical_exponent:.3f}",
        )

    def varcheck(self) -> None:
        oracle = self.config.oracle
        setup = self.setup
        if oracle.variation_initial is not None:
            setup = setup.replace(law=oracle.variation_initial)
        history = VariationHistory()
        report = run_fd_variation_check(
            setup, oracle.epsilons, oracle.p, phi=oracle.variation_phi, base_observers=[history]
        )
        moments = moment_probe(history, oracle.p, oracle.moment_bound_factor)
        self.write("varcheck.csv", ["epsilon", "sup_error_p", "std_error"], report.rows())
        self.write(
            "moments.csv", ["t", "mean_abs_v_pow_p", "ratio_to_initial"], moments.rows()
        )
        if report.degenerate:
            self._log("差分商は変分と丸め誤差の範囲で一致します（摂動が平行移動）", "WARNING")
        else:
            self._log(f"変分の差分商との誤差の次数: {report.order:.3f}")
        self.check(
            "変分の差分商への収束",
            report.degenerate or report.monotone,
            ", ".join(f"ε={e:g}: {v:.3g}" for e, v in zip(report.epsilons, report.values, strict=True)),
        )
        self.check(
            "変分のモーメント有界性",
            moments.within_bound,
            f"sup 比 {moments.sup_ratio:.4g}（許容 {moments.bound_factor:g}）",
        )

    def kernel_diff_probe(self) -> None:
        oracle = self.config.oracle
        setup = self.setup
        theta = oracle.theta
        if theta is None:
            low, high = theta_interval(setup.k_prime, setup.p)
            theta = 0.5 * (low + high)
        report = kernel_difference_probe(
            setup,
            oracle.epsilons,
            theta,
            probe_times=oracle.probe_times,
            t_min=oracle.t_min,
            n_probe=oracle.n_probe,
        )
        self.write(
            "kdiff.csv",
            ["epsilon", "t", "value", "std_error", "theoretical_exponent"],
            report.rows(),
        )
        for epsilon in report.rows_by_epsilon:
            slope = report.slope(epsilon)
            if math.isnan(slope):
                self._log(f"ε={epsilon:g}: 値が0のため傾きを省略します")
                continue
            self.check(
                f"カーネル差分の指数 (ε={epsilon:g})",
                slope >= report.theoretical_exponent - SLOPE_TOLERANCE,
                f"傾き {slope:.3f}, 理論指数 {report.theoretical_exponent:.3f}, θ={theta:g}",
            )

    def run_all(self) -> None:
        self.validate()
        self.simulate()
        self.fd_check()
        self.girsanov_check()
        if self.setup.law.kind == "gaussian":
            self.scaling_probe()
        else:
            self._log("初期分布が gaussian でないため scaling-probe を省略します", "WARNING")
        self.varcheck()
        self.kernel_diff_probe()

    def dispatch(self, subcommand: str) -> None:
        actions: dict[str, Callable[[], None]] = {
            "validate": self.validate,
            "simulate": self.simulate,
            "bismut": self.bismut,
            "fd-check": self.fd_check,
            "girsanov-check": self.girsanov_check,
            "scaling-probe": self.scaling_probe,
            "varcheck": self.varcheck,
            "kernel-diff-probe": self.kernel_diff_probe,
            "all": self.run_all,
        }
        if subcommand not in actions:
            raise ValueError(f"未知のサブコマンドです: {subcommand}")
        if subcommand != "validate":
            check_assumptions(self.config)
        actions[subcommand]()


def run_command(
    subcommand: str, config: RunConfig, *, out_dir: str | Path | None = None, verbose: bool = False
) -> int:
    """
    サブコマンドを実行して終了ステータスを返す

    Returns:
        すべての判定が成功すれば0、失敗またはエラーがあれば1
    """
    harness = Harness(
        config=config,
        out_dir=Path(out_dir if out_dir is not None else config.output.dir),
        verbose=verbose,
    )
    harness._log(f"{subcommand} を開始します (digest={harness.digest[:12]})")
    try:
        harness.dispatch(subcommand)
    except ConfigValidationError as e:
        harness.failures.extend(e.failures)
        csv_io.write_failures(harness.out_dir / "failures.csv", harness.failures, harness.digest)
        raise
    except ValueError as e:
        harness.failures.append((subcommand, str(e)))
        csv_io.write_failures(harness.out_dir / "failures.csv", harness.failures, harness.digest)
        raise

    if harness.failures:
        path = csv_io.write_failures(harness.out_dir / "failures.csv", harness.failures, harness.digest)
        harness._log(f"{len(harness.failures)} 件の判定が失敗しました: {path}", "ERROR")
        return 1
    harness._log(f"完了しました（{len(harness.written)} ファイル）")
    return 0
