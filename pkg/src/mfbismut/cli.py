"""
コマンドラインインターフェース
"""

import argparse
import sys
from pathlib import Path

from . import csv_io
from .config import RunConfig, list_presets, load_run_config, preset_path
from .harness import SUBCOMMANDS, run_command


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfbismut",
        description="特異相互作用を持つ平均場SDEの粒子シミュレーションと内在微分の推定を行います",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  # 設定の仮定を検証
  %(prog)s validate --preset heat_semigroup

  # Bismut 型推定量と有限差分オラクルを比較
  %(prog)s fd-check --config config/run_config.yaml --seed 7 --out runs/fd

  # すべての診断を実行
  %(prog)s all --preset gaussian_kernel_bench --verbose

  # 同梱プリセットの一覧
  %(prog)s presets
        """,
    )
    parser.add_argument(
        "subcommand", choices=[*SUBCOMMANDS, "presets"], help="実行するサブコマンド"
    )

    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", help="実行設定ファイルのパス（.yaml）")
    source.add_argument("--preset", help="同梱プリセット名（presets で一覧を表示）")

    parser.add_argument("--seed", type=int, help="sim.seed を上書きする（64ビット非負整数）")
    parser.add_argument("--out", help="成果物の出力ディレクトリ（デフォルト: output.dir）")
    parser.add_argument("-v", "--verbose", action="store_true", help="詳細ログを表示")
    return parser


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    """sim.seed だけを差し替えた設定を返す"""
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed は64ビット非負整数である必要があります: {seed}")
    return config.model_copy(update={"sim": config.sim.model_copy(update={"seed": seed})})


def load_config(args: argparse.Namespace) -> RunConfig:
    """--config / --preset / --seed から実行設定を組み立てる"""
    config_path = args.config if args.config is not None else preset_path(args.preset)
    print(f"設定ファイルを読み込み中: {config_path}")
    # 仮定の検証はサブコマンドの中で行う（validate は失敗を一覧として出力する）
    config = load_run_config(config_path, check=False)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    return config


def main(argv: list[str] | None = None) -> int:
    """CLIのメインエントリーポイント"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.subcommand == "presets":
            for name in list_presets():
                print(name)
            return 0

        if args.config is None and args.preset is None:
            print("エラー: --config または --preset を指定してください", file=sys.stderr)
            parser.print_help()
            return 1

        try:
            config = load_config(args)
        except ValueError as e:
            # 設定が読めない場合も --out があれば failures.csv を残す（digest は空）
            if args.out is not None:
                csv_io.write_failures(Path(args.out) / "failures.csv", [("config", str(e))], "")
            raise
        print(f"✓ 設定を読み込みました (d={config.model.d}, N={config.sim.N}, M={config.sim.M})")
        print()

        return run_command(args.subcommand, config, out_dir=args.out, verbose=args.verbose)

    except ValueError as e:
        print(f"エラー: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"予期しないエラーが発生しました: {e}", file=sys.stderr)
        import traceback

        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
