"""End-to-end run on synthetic data, small enough for a laptop CPU.

1. draw a labelled synthetic train/test set and preprocess it;
2. train a narrow segmentation network on the morphology maps;
3. train a small regressor on image plus predicted maps;
4. score both on the test split and save an overlay and a Grad-CAM map.

The networks are scaled down (``--base-width``, ``--width-mult``) and run at
256x128 so the whole script finishes in a few minutes; the full-size
defaults are used by the CLI.

    python demos/02_small_pipeline.py --out demo_out/pipeline
"""
import argparse
import logging
from pathlib import Path

import cv2
import numpy as np
import torch

from spinemorph.dataset import PreprocessConfig, preprocess
from spinemorph.evaluation import evaluate_regression, evaluate_segmentation, gradcam_heatmap, render_overlay
from spinemorph.morphology import synthesize_maps
from spinemorph.networks import RegNetConfig, SegNetConfig
from spinemorph.synthetic import synthetic_dataset
from spinemorph.training import TrainConfig, assemble_inputs, normalize_image, train_regression, train_segmentation


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-train", type=int, default=24)
    parser.add_argument("--n-test", type=int, default=6)
    parser.add_argument("--seg-epochs", type=int, default=30)
    parser.add_argument("--reg-epochs", type=int, default=60)
    parser.add_argument("--base-width", type=int, default=8)
    parser.add_argument("--width-mult", type=float, default=0.25)
    parser.add_argument("--out", default="demo_out/pipeline")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.manual_seed(0)
    out = Path(args.out)

    pre = PreprocessConfig(target_height=256, target_width=128)
    train = [preprocess(r, pre) for r in synthetic_dataset(args.n_train, seed=1, shape=(400, 200))]
    test = [preprocess(r, pre) for r in
            synthetic_dataset(args.n_test, seed=2, shape=(400, 200), split="test", prefix="tst")]

    seg_cfg = TrainConfig(stage="seg", epochs=args.seg_epochs, base_lr=3e-3, seed=0)
    seg = train_segmentation(train, seg_cfg, SegNetConfig(base_width=args.base_width, input_size=(256, 128)),
                             out_dir=out / "seg").model

    reg_cfg = TrainConfig(stage="reg", epochs=args.reg_epochs, base_lr=2e-3, seed=0)
    reg_model_cfg = RegNetConfig(width_mult=args.width_mult, depth_mult=0.2, dropout=0.1, input_size=(256, 128))
    reg = train_regression(train, reg_cfg, seg_model=seg, model_cfg=reg_model_cfg, out_dir=out / "reg").model

    seg_report = evaluate_segmentation(seg, test)
    reg_report = evaluate_regression(reg, seg, test)
    seg_report.save(out / "seg_report.json")
    reg_report.save(out / "reg_report.json")
    print("segmentation:", {k: round(v, 1) for k, v in seg_report.metrics.items()})
    print("regression:  ", {k: round(v, 2) for k, v in reg_report.metrics.items()})

    # one test image: region overlay and a Grad-CAM map for the main thoracic angle
    rec = test[0]
    image = torch.from_numpy(normalize_image(rec.image))[None, None]
    with torch.no_grad():
        probs = seg(image)
    gt = synthesize_maps(rec.landmarks, rec.image.shape).region
    overlay = render_overlay(gt, probs[0, 0].numpy() >= 0.5, rec.image)
    heat = gradcam_heatmap(reg, assemble_inputs(image, probs, reg.cfg.inputs)[0], "mt")
    jet = cv2.applyColorMap(np.round(255 * heat).astype(np.uint8), cv2.COLORMAP_JET)
    cv2.imwrite(str(out / "overlay.png"), cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR))
    cv2.imwrite(str(out / "gradcam.png"), cv2.addWeighted(cv2.cvtColor(rec.image, cv2.COLOR_GRAY2BGR), 0.5, jet, 0.5, 0))
    print(f"images and reports in {out}")


if __name__ == "__main__":
    main()
