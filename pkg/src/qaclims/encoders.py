"""Frozen image/text encoder pairs mapping into one embedding space.

:class:`MockEncoders` is a deterministic, differentiable stand-in for a
CLIP-style pair. Image side: a bank of color detectors
``relu(c_j . x - kappa * |x|)`` applied per pixel, mean-pooled and
projected by a fixed matrix with orthonormal columns. One extra detector
``w * exp(-|x|^2 / (2 sigma^2))`` fires on dark pixels, so masked-out areas
read as black content (as they would to a real image encoder) instead of
vanishing; with ``dark_sigma=None`` the detectors are positively
homogeneous and encoding ``X * R`` is linear in the mask ``R``. Text side: a bag of token vectors. Tokens listed in the
lexicon (token -> list of RGB colors) are embedded exactly where the image
side puts those colors; other tokens get a hash-seeded random vector.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import re
import urllib.request
from typing import Protocol

import numpy as np
import torch

from .raster import to_uint8

STOPWORDS = frozenset({"a", "an", "the", "photo", "of", "this", "is", "in"})

# Generic hue wheel plus gray, used when no lexicon is supplied.
_GENERIC_COLORS = [
    (1.0, 0.0, 0.0), (1.0, 0.4, 0.0), (1.0, 1.0, 0.0), (0.4, 1.0, 0.0),
    (0.0, 1.0, 0.0), (0.0, 1.0, 0.4), (0.0, 1.0, 1.0), (0.0, 0.4, 1.0),
    (0.0, 0.0, 1.0), (0.4, 0.0, 1.0), (1.0, 0.0, 1.0), (1.0, 0.0, 0.4),
    (1.0, 1.0, 1.0),
]


class EncoderPair(Protocol):
    dim: int
    differentiable: bool

    def encode_image(self, images): ...

    def encode_text(self, text: str): ...


def _token_seed(token, seed):
    return int.from_bytes(hashlib.sha256(f"{seed}:{token}".encode()).digest()[:8], "big")


def tokenize(text):
    return re.findall(r"[a-z0-9]+", text.lower())


class MockEncoders:
    """Color-detector image encoder and lexicon-aligned bag-of-tokens text encoder."""

    differentiable = True

    def __init__(self, lexicon=None, dim=64, cone_deg=12.0, seed=0, dtype=torch.float32, dark_sigma=0.2,
                 dark_weight=0.25):
        self.lexicon = {k.lower(): [tuple(map(float, c)) for c in v] for k, v in (lexicon or {}).items()}
        colors = []
        for cols in self.lexicon.values():
            for c in cols:
                if c not in colors:
                    colors.append(c)
        for c in _GENERIC_COLORS:
            if not any(_angle(c, d) < 1e-6 for d in colors):
                colors.append(c)
        n_det = len(colors) + (dark_sigma is not None)
        if n_det > dim:
            raise ValueError(f"{n_det} detectors do not fit in dim={dim}")
        if dark_sigma is not None and dark_sigma <= 0:
            raise ValueError("dark_sigma must be positive")
        self.dim = dim
        self.seed = seed
        self.dark_sigma = dark_sigma
        self.dark_weight = dark_weight
        self.kappa = math.cos(math.radians(cone_deg))
        self.dtype = dtype
        det = np.asarray(colors, dtype=np.float64)
        det /= np.linalg.norm(det, axis=1, keepdims=True)
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_det)))
        self._detectors = torch.as_tensor(det, dtype=torch.float64)
        self._proj = torch.as_tensor(q, dtype=torch.float64)  # (dim, J), orthonormal columns
        self._text_cache = {}

    @property
    def backend_id(self):
        return f"mock-encoders-v2:d{self.dim}:s{self.seed}:lex{len(self.lexicon)}:dark{self.dark_sigma}x{self.dark_weight}"

    def _features(self, x):
        # x (..., 3) -> (..., J); the eps keeps the norm differentiable at black pixels.
        det = self._detectors.to(x.dtype)
        sq = (x * x).sum(-1, keepdim=True)
        f = torch.relu((x @ det.T - self.kappa * torch.sqrt(sq + 1e-12)) / (1.0 - self.kappa))
        if self.dark_sigma is None:
            return f
        return torch.cat([f, self.dark_weight * torch.exp(-sq / (2.0 * self.dark_sigma ** 2))], dim=-1)

    def encode_image(self, images):
        """Embed images of shape (..., H, W, 3); returns (..., dim)."""
        x = torch.as_tensor(images)
        if not torch.is_floating_point(x):
            x = x.to(self.dtype)
        feats = self._features(x).mean(dim=(-3, -2))
        return feats @ self._proj.to(x.dtype).T

    def _token_vector(self, token):
        cols = self.lexicon.get(token)
        if cols is not None:
            x = torch.as_tensor(cols, dtype=torch.float64)
            v = (self._features(x) @ self._proj.T).mean(0)
            return v / v.norm()
        g = np.random.default_rng(_token_seed(token, self.seed)).standard_normal(self.dim)
        return torch.as_tensor(g / np.linalg.norm(g), dtype=torch.float64)

    def encode_text(self, text):
        if text not in self._text_cache:
            v = torch.zeros(self.dim, dtype=torch.float64)
            for tok in tokenize(text):
                if tok not in STOPWORDS:
                    v = v + self._token_vector(tok)
            self._text_cache[text] = v
        return self._text_cache[text].to(self.dtype)

    def encode_texts(self, texts):
        return torch.stack([self.encode_text(t) for t in texts])


def _angle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(min(1.0, max(-1.0, c)))


class ExternalEncoders:
    """HTTP adapter for a real encoder pair.

    ``GET {url}/info`` returns ``{"dim": D}`` (the handshake);
    ``POST {url}/image`` with ``{"image": <base64 PNG>}`` and
    ``POST {url}/text`` with ``{"text": str}`` both return
    ``{"embedding": [D floats]}``. Outputs carry no gradient, so these
    encoders serve corpus/similarity inspection but not training.
    """

    differentiable = False

    def __init__(self, url, timeout=30.0, dtype=torch.float32):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.dtype = dtype
        info = self._call("GET", "/info")
        self.dim = int(info["dim"])
        self.backend_id = f"external:{self.url}:d{self.dim}"
        self._text_cache = {}

    def _call(self, method, route, payload=None):
        data = None if payload is None else json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(
            self.url + route, data=data, method=method,
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def _vector(self, reply):
        v = torch.as_tensor(reply["embedding"], dtype=self.dtype)
        if v.shape != (self.dim,):
            raise ValueError(f"encoder returned shape {tuple(v.shape)}, expected ({self.dim},)")
        return v

    def encode_image(self, images):
        from PIL import Image

        arr = torch.as_tensor(images).detach().cpu().numpy()
        lead = arr.shape[:-3]
        flat = arr.reshape((-1,) + arr.shape[-3:])
        out = []
        for img in flat:
            buf = io.BytesIO()
            Image.fromarray(to_uint8(img)).save(buf, format="PNG")
            reply = self._call("POST", "/image", {"image": base64.b64encode(buf.getvalue()).decode("ascii")})
            out.append(self._vector(reply))
        return torch.stack(out).reshape(lead + (self.dim,))

    def encode_text(self, text):
        if text not in self._text_cache:
            self._text_cache[text] = self._vector(self._call("POST", "/text", {"text": text}))
        return self._text_cache[text]

    def encode_texts(self, texts):
        return torch.stack([self.encode_text(t) for t in texts])
