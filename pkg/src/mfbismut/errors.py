"""
例外クラス

すべての例外は MfbError（ValueError のサブクラス）を基底とする。
CLIは ValueError を捕捉してエラーメッセージを表示する。
"""


class MfbError(ValueError):
    """mfbismut の基底例外"""


class SingularEvaluation(MfbError):
    """正則化なしの特異カーネルを原点で評価した"""

    def __init__(self, message: str = "特異カーネルを z=0 で評価しました（delta > 0 を指定してください）"):
        super().__init__(message)


class NonFinite(MfbError):
    """NaN/Inf を検出した"""

    def __init__(self, what: str, step_index: int | None = None):
        self.what = what
        self.step_index = step_index
        where = f"ステップ {step_index}" if step_index is not None else "評価結果"
        super().__init__(f"{where} で非有限値を検出しました: {what}")


class SingularDiffusion(MfbError):
    """a = σσ* が（数値的に）可逆でない"""

    def __init__(self, condition_number: float):
        self.condition_number = condition_number
        super().__init__(f"拡散行列 a=σσ* が特異です（条件数 {condition_number:.3e}）")


class InvalidLaw(MfbError):
    """初期分布のパラメータが不正"""


class InvalidGrid(MfbError):
    """時間グリッドのパラメータが不正"""


class OutOfRange(MfbError):
    """引数が定義域外"""


class MissingIncrements(MfbError):
    """確率積分に必要なブラウン増分が保持されていない"""

    def __init__(self):
        super().__init__("ブラウン増分が記録されていません（increments を保持して実行してください）")


class ConfigParseError(MfbError):
    """設定ファイルの読み込み・構文・キーのエラー"""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        self.message = message
        context = []
        if line is not None:
            context.append(f"行 {line}")
        if key is not None:
            context.append(f"キー '{key}'")
        prefix = ", ".join(context)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ConfigValidationError(MfbError):
    """仮定（H）・定理の条件を満たさない設定"""

    def __init__(self, failures: list[tuple[str, str]]):
        self.failures = failures
        lines = [f"  - {name}: {detail}" for name, detail in failures]
        super().__init__(f"{len(failures)} 件の条件を満たしていません:\n" + "\n".join(lines))
