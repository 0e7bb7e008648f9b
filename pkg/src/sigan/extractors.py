"""Feature extractors for distribution-distance evaluation.

An extractor maps a batch of grayscale images in [-1, 1] (B x H x W) to a
B x D feature matrix. The production extractor is a pretrained Inception
v3's final pooled 2048-dim layer; a trivial mean-pixel extractor (D = 1)
exists so the distance machinery can be exercised hermetically.

The SIGAN_CACHE environment variable relocates the pretrained-weight
download/cache directory.
"""

import logging
import os

import numpy as np
import torch

from sigan.errors import ExtractorError

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "SIGAN_CACHE"


class MeanPixelExtractor:
    """Degenerate 1-D extractor: the mean pixel value per image."""

    extractor_id = "mean-pixel-1d"
    feature_dim = 1

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        arr = np.asarray(batch, dtype=np.float32)
        if arr.ndim != 3:
            raise ExtractorError(f"expected a B x H x W batch, got shape {arr.shape}")
        return arr.mean(axis=(1, 2)).reshape(-1, 1).astype(np.float32)


class InceptionV3Extractor:
    """Pretrained Inception v3, final pooled layer (2048-dim).

    Input convention: grayscale [-1, 1] is mapped to [0, 1], replicated to
    three channels, bilinearly resized to 299 x 299, and normalized with the
    ImageNet statistics the weights were trained with. The classifier head
    is dropped so the forward pass yields the pooled features directly.
    """

    extractor_id = "inception-v3-pool2048-torchvision"
    feature_dim = 2048

    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self):
        self._model = None

    def _build(self):
        cache = os.environ.get(CACHE_ENV_VAR)
        if cache:
            torch.hub.set_dir(cache)
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3

            model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        except ImportError as exc:
            raise ExtractorError(f"torchvision is required for the inception-v3 extractor: {exc}") from exc
        except Exception as exc:  # weight download/cache failures surface here
            raise ExtractorError(
                "could not load pretrained inception-v3 weights "
                f"({exc}); set {CACHE_ENV_VAR} to a directory that already contains them "
                "or allow network access for the first download"
            ) from exc
        model.fc = torch.nn.Identity()
        model.eval()
        self._model = model

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        if self._model is None:
            self._build()
        arr = np.asarray(batch, dtype=np.float32)
        if arr.ndim != 3:
            raise ExtractorError(f"expected a B x H x W batch, got shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr))[:, None]
        x = (x + 1.0) / 2.0
        x = x.repeat(1, 3, 1, 1)
        x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor(self._MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self._STD).view(1, 3, 1, 1)
        x = (x - mean) / std
        with torch.no_grad():
            features = self._model(x)
        return features.numpy().astype(np.float32)


_REGISTRY = {
    "mean-pixel": MeanPixelExtractor,
    "inception-v3": InceptionV3Extractor,
}


def register_extractor(name: str, factory):
    """Add a custom extractor factory under a registry name."""
    _REGISTRY[name] = factory


def available_extractors() -> list[str]:
    return sorted(_REGISTRY)


def get_extractor(name: str):
    """Instantiate a registered extractor, accepting full ids as aliases."""
    if name in _REGISTRY:
        return _REGISTRY[name]()
    for factory in _REGISTRY.values():
        if getattr(factory, "extractor_id", None) == name:
            return factory()
    raise ExtractorError(f"unknown extractor {name!r}; available: {available_extractors()}")
