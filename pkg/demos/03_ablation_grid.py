"""Input and loss ablation grid driven entirely through the CLI.

Each row trains a regressor with a different ``--inputs`` / ``--losses``
combination, evaluates it, and the script tabulates the reports together with
their config digests. Every report can be traced back to its row from the
digest alone.

    python demos/03_ablation_grid.py --manifest data/manifest.json --out runs/ablation

Without ``--manifest`` a small synthetic manifest is generated and tiny
networks are trained for one epoch, which only exercises the plumbing.
"""
import argparse
import json
from pathlib import Path

from spinemorph.cli import run
from spinemorph.dataset import save_manifest
from spinemorph.synthetic import synthetic_dataset

ALL = "image,region,centerline,boundary"
ROWS = [
    ("image", "smape,mae,cmae"),
    ("image,region", "smape,mae,cmae"),
    ("image,region,centerline", "smape,mae,cmae"),
    (ALL, "smape,mae,cmae"),
    (ALL, "smape"),
    (ALL, "smape,mae"),
]


def cli(*argv):
    code = run([str(a) for a in argv])
    if code != 0:
        raise SystemExit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--manifest")
    parser.add_argument("--seg-ckpt", help="reuse a trained segmentation checkpoint")
    parser.add_argument("--out", default="demo_out/ablation")
    args = parser.parse_args()
    out = Path(args.out)

    extra, tiny_reg = [], []
    manifest = args.manifest
    if manifest is None:
        records = synthetic_dataset(8, seed=1, shape=(320, 160)) + synthetic_dataset(
            4, seed=2, shape=(320, 160), split="test", prefix="tst")
        manifest = save_manifest(records, out / "data")
        extra = ["--height", 256, "--width", 128]
        tiny_reg = ["--width-mult", 0.25, "--depth-mult", 0.2, "--epochs", 1]

    seg = args.seg_ckpt
    if seg is None:
        tiny_seg = ["--base-width", 8, "--epochs", 1] if args.manifest is None else []
        cli("train-seg", "--manifest", manifest, "--out", out / "seg", *extra, *tiny_seg)
        seg = out / "seg" / "seg_final.pt"

    print(f"{'row':>3}  {'inputs':<34} {'losses':<15} {'digest':<16} {'MAE':>7} {'SMAPE':>7}")
    for k, (inputs, losses) in enumerate(ROWS, start=1):
        row = out / f"row{k}"
        cli("train-reg", "--manifest", manifest, "--seg-ckpt", seg, "--out", row, "--inputs", inputs,
            "--losses", losses, *extra, *tiny_reg)
        cli("evaluate", "--manifest", manifest, "--seg-ckpt", seg, "--reg-ckpt", row / "reg_final.pt",
            "--out", row / "report.json", *extra)
        rep = json.loads((row / "report.json").read_text())
        print(f"{k:>3}  {inputs:<34} {losses:<15} {rep['config_digest']:<16} {rep['mae']:7.2f} {rep['smape']:7.2f}")


if __name__ == "__main__":
    main()
