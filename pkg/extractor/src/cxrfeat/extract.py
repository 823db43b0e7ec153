"""Backbone loading, preprocessing, and feature export.

Each image is resized to 224x224, converted to a tensor, and normalized
with the backbones' standard input statistics. Features are the spatially
pooled penultimate activations (pre-classifier) of DenseNet-161 and
EfficientNet-B7, concatenated in that order; the widths are read from the
loaded models (2208 + 2560 = 4768 for the stock architectures) and the
concatenation order is recorded in a comment line above the CSV header.

Feature cells are written with ``repr`` of the float64 value, so the file
round-trips bit-exactly through the engine's loader.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import torch
import torchvision
from PIL import Image
from torchvision import transforms

from .manifest import LABEL_COLUMNS, ExtractionManifest, ManifestError

# standard input statistics of both pretrained backbones
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PREPROCESS = transforms.Compose([
    transforms.Resize((224, 224)),
    transforms.ToTensor(),
    transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
])


class WeightsUnavailableError(RuntimeError):
    """Pretrained weights could not be obtained."""


@dataclass
class BackbonePair:
    densenet: torch.nn.Module
    efficientnet: torch.nn.Module
    densenet_width: int
    efficientnet_width: int
    weights: str  # "pretrained" | "random"

    @property
    def total_width(self) -> int:
        return self.densenet_width + self.efficientnet_width


def load_backbones(weights: str = "pretrained", seed: int = 0,
                   device: str = "cpu") -> BackbonePair:
    """Build both backbones in eval mode.

    ``weights="pretrained"`` loads the published checkpoints (aborts with
    WeightsUnavailableError when they cannot be fetched); ``"random"``
    uses a seeded random initialization, which keeps the full pipeline
    runnable offline and deterministic for contract tests.
    """
    if weights == "pretrained":
        try:
            dn = torchvision.models.densenet161(
                weights=torchvision.models.DenseNet161_Weights.DEFAULT)
            eff = torchvision.models.efficientnet_b7(
                weights=torchvision.models.EfficientNet_B7_Weights.DEFAULT)
        except Exception as exc:
            raise WeightsUnavailableError(
                f"could not load pretrained weights ({exc}); pass "
                f"--weights random for an offline run") from exc
    elif weights == "random":
        torch.manual_seed(seed)
        dn = torchvision.models.densenet161(weights=None)
        eff = torchvision.models.efficientnet_b7(weights=None)
    else:
        raise ValueError(f"weights must be 'pretrained' or 'random', got {weights!r}")

    dn.eval()
    eff.eval()
    dn.to(device)
    eff.to(device)
    return BackbonePair(
        densenet=dn,
        efficientnet=eff,
        densenet_width=dn.classifier.in_features,
        efficientnet_width=eff.classifier[1].in_features,
        weights=weights,
    )


@torch.no_grad()
def fused_features(pair: BackbonePair, batch: torch.Tensor) -> torch.Tensor:
    """Pooled penultimate features of both backbones, DenseNet first."""
    f = pair.densenet.features(batch)
    f = torch.nn.functional.relu(f, inplace=True)
    f = torch.nn.functional.adaptive_avg_pool2d(f, (1, 1)).flatten(1)
    g = pair.efficientnet.features(batch)
    g = pair.efficientnet.avgpool(g).flatten(1)
    return torch.cat([f, g], dim=1)


def _load_image(entry) -> torch.Tensor:
    try:
        with Image.open(entry.path) as img:
            return PREPROCESS(img.convert("RGB"))
    except ManifestError:
        raise
    except Exception as exc:
        raise ManifestError(
            f"unreadable image for id {entry.id!r}: {entry.path} ({exc})") from exc


def extract_features(
    manifest: ExtractionManifest,
    pair: BackbonePair,
    batch_size: int = 8,
    device: str = "cpu",
    progress: bool = False,
) -> None:
    """Run both backbones over every manifest image and write the feature
    CSV; rows appear in manifest order."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    width = pair.total_width

    manifest.output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest.output_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(
            f"# feature order: densenet161[{pair.densenet_width}]"
            f" + efficientnet_b7[{pair.efficientnet_width}]"
            f" (weights: {pair.weights})\n")
        fh.write("id," + ",".join(f"f{i}" for i in range(width))
                 + "," + ",".join(LABEL_COLUMNS) + "\n")
        for start in range(0, len(manifest.entries), batch_size):
            chunk = manifest.entries[start : start + batch_size]
            batch = torch.stack([_load_image(e) for e in chunk]).to(device)
            feats = fused_features(pair, batch).to(torch.float64).cpu().numpy()
            for entry, row in zip(chunk, feats):
                cells = [entry.id]
                cells += [repr(float(v)) for v in row]
                cells += [entry.labels[c] for c in LABEL_COLUMNS]
                fh.write(",".join(cells) + "\n")
            if progress:
                done = min(start + batch_size, len(manifest.entries))
                print(f"extracted {done}/{len(manifest.entries)}", file=sys.stderr)
