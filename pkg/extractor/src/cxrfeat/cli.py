"""CLI: cxr-extract --metadata meta.csv --images dir --out features.csv"""

from __future__ import annotations

import argparse
import sys

from .extract import WeightsUnavailableError, extract_features, load_backbones
from .manifest import ManifestError, load_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxr-extract",
        description="Export fused DenseNet-161 + EfficientNet-B7 features "
                    "in the engine's feature CSV contract",
    )
    parser.add_argument("--metadata", required=True,
                        help="metadata CSV (id,filename,<label columns>)")
    parser.add_argument("--images", required=True, help="image directory")
    parser.add_argument("--out", required=True, help="output feature CSV path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--weights", choices=("pretrained", "random"),
                        default="pretrained",
                        help="'random' = seeded random init for offline runs")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for --weights random")
    parser.add_argument("--progress", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = load_manifest(args.metadata, args.images, args.out)
        pair = load_backbones(weights=args.weights, seed=args.seed,
                              device=args.device)
        extract_features(manifest, pair, batch_size=args.batch,
                         device=args.device, progress=args.progress)
    except (ManifestError, WeightsUnavailableError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(manifest.entries)} rows x {pair.total_width} features "
          f"-> {manifest.output_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
