"""Side-by-side figure of test images and their question-guided attention maps.

    python3 scripts/attention_figure.py --checkpoint runs/att/model.ckpt --data runs/data --out runs/attention.png

Each row shows the scene, the map upsampled to image size as a gray overlay,
and the question with the predicted and true answers printed underneath.
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from abccnn.training import infer, load_checkpoint, load_split


def overlay(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Darken each cell in proportion to how little attention it receives."""
    n = m.shape[0]
    cell = image.shape[0] // n
    weight = np.kron(m / m.max(), np.ones((cell, cell)))[..., None]
    return (image * (0.15 + 0.85 * weight)).astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="attention.png")
    ap.add_argument("--rows", type=int, default=8)
    ap.add_argument("--categories", default="color,location", help="comma-separated question categories to show")
    ap.add_argument("--scale", type=int, default=3, help="pixel upscaling factor")
    args = ap.parse_args()

    model, _, _ = load_checkpoint(args.checkpoint)
    split = load_split(args.data, "test", model.dims.grid)
    keep = [i for i, it in enumerate(split.items) if it.category in args.categories.split(",")][: args.rows]
    split = split.subset(keep)
    preds, _, maps = infer(model, split)

    tiles = []
    for it, pred, m in zip(split.items, preds, maps):
        img = np.asarray(Image.open(Path(args.data) / it.image_path).convert("RGB"))
        pair = np.concatenate([img, np.full((img.shape[0], 4, 3), 255, np.uint8), overlay(img, m)], axis=1)
        tile = Image.fromarray(pair).resize((pair.shape[1] * args.scale, pair.shape[0] * args.scale), Image.NEAREST)
        canvas = Image.new("RGB", (max(tile.width, 360), tile.height + 30), "white")
        canvas.paste(tile, (0, 0))
        ImageDraw.Draw(canvas).text((2, tile.height + 2), f"{it.question}?\npred {pred} / true {it.answer}", fill="black")
        tiles.append(canvas)
    if not tiles:
        raise SystemExit("no test items in the requested categories")
    sheet = Image.new("RGB", (max(t.width for t in tiles), sum(t.height for t in tiles)), "white")
    y = 0
    for t in tiles:
        sheet.paste(t, (0, y))
        y += t.height
    sheet.save(args.out)
    print(f"wrote {args.out} ({len(tiles)} rows)")


if __name__ == "__main__":
    main()
