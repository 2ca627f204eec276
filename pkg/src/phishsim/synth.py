"""Synthetic desk-scale screenshot corpus.

Generates small website-like images: each protected site gets a stable
identity (header color, accent color, a 5x5 logo glyph at a fixed position),
trusted pages vary their content layout, phishing pages keep the identity
cues but swap in a login-form layout with stronger rendering jitter, and
benign pages are fresh identities that reuse both layout styles so layout
alone cannot separate the classes.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import cv2
import numpy as np

from .corpus import (
    IMAGE_SIZE,
    CorpusManifest,
    Screenshot,
    WebsiteIdentity,
    write_manifest,
)

_CATEGORIES = ("banking", "saas", "payment", "email")

TRUSTED_JITTER = (0.92, 1.08)
PHISHING_JITTER = (0.80, 1.20)
BENIGN_JITTER = (0.85, 1.15)
LOGO_POSITION_JITTER = 6


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def _rect(img: np.ndarray, x: int, y: int, w: int, h: int, color) -> None:
    x0, y0 = max(0, x), max(0, y)
    img[y0:max(y0, y + h), x0:max(x0, x + w)] = color


class _SiteIdentity:
    """Visual identity parameters for one (real or benign) website."""

    def __init__(self, rng: np.random.Generator, hue: float):
        self.hue = hue
        self.header_color = _hsv(hue, rng.uniform(0.6, 0.9), rng.uniform(0.5, 0.8))
        self.body_color = _hsv(hue, rng.uniform(0.04, 0.12), rng.uniform(0.93, 0.99))
        self.accent_color = _hsv(hue + 0.45, rng.uniform(0.5, 0.85), rng.uniform(0.5, 0.8))
        self.header_height = int(rng.integers(28, 44))
        self.footer_height = int(rng.integers(14, 26))
        glyph = rng.random((5, 5)) < 0.55
        glyph[2, 2] = True
        self.logo_glyph = glyph
        self.logo_x = int(rng.integers(8, 170))
        self.logo_y = int(rng.integers(2, max(3, self.header_height - 22)))
        self.logo_color = _hsv(hue + rng.uniform(-0.08, 0.08), 0.2, 0.98)

    def draw_chrome(self, img: np.ndarray, rng: np.random.Generator,
                    hue_jitter: float = 0.0, logo_jitter: int = 0) -> None:
        if hue_jitter:
            header = _hsv(
                self.hue + rng.uniform(-hue_jitter, hue_jitter),
                0.75, rng.uniform(0.55, 0.75),
            )
        else:
            header = self.header_color
        _rect(img, 0, 0, IMAGE_SIZE, self.header_height, header)
        _rect(img, 0, IMAGE_SIZE - self.footer_height, IMAGE_SIZE,
              self.footer_height, self.header_color * 0.6)
        lx, ly = self.logo_x, self.logo_y
        if logo_jitter:
            lx += int(rng.integers(-logo_jitter, logo_jitter + 1))
            ly += int(rng.integers(-min(logo_jitter, 2), min(logo_jitter, 2) + 1))
        cell = 4
        for gy in range(5):
            for gx in range(5):
                if self.logo_glyph[gy, gx]:
                    _rect(img, lx + gx * cell, ly + gy * cell, cell, cell, self.logo_color)


def _text_lines(img, rng, x, y, width, n_lines, color=0.35):
    for i in range(n_lines):
        w = int(width * rng.uniform(0.5, 1.0))
        _rect(img, x, y + i * 7, w, 3, np.float32(color))


def _draw_content_page(identity: _SiteIdentity, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = identity.body_color
    identity.draw_chrome(img, rng)
    top = identity.header_height + 6
    bottom = IMAGE_SIZE - identity.footer_height - 6
    n_blocks = int(rng.integers(3, 8))
    for _ in range(n_blocks):
        w = int(rng.integers(40, 110))
        h = int(rng.integers(18, 56))
        x = int(rng.integers(4, IMAGE_SIZE - w - 4))
        y = int(rng.integers(top, max(top + 1, bottom - h)))
        roll = rng.random()
        if roll < 0.4:
            color = identity.accent_color * rng.uniform(0.8, 1.2)
        elif roll < 0.7:
            color = identity.header_color * rng.uniform(0.9, 1.3)
        else:
            color = np.float32(rng.uniform(0.75, 1.0))
        _rect(img, x, y, w, h, np.clip(color, 0, 1))
    _text_lines(img, rng, int(rng.integers(8, 40)), int(rng.integers(top, top + 30)),
                int(rng.integers(80, 170)), int(rng.integers(2, 6)))
    return img


def _draw_login_page(identity: _SiteIdentity, rng: np.random.Generator,
                     hue_jitter: float, logo_jitter: int) -> np.ndarray:
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = np.float32(rng.uniform(0.9, 1.0))
    identity.draw_chrome(img, rng, hue_jitter=hue_jitter, logo_jitter=logo_jitter)
    panel_w = int(rng.integers(100, 150))
    panel_h = int(rng.integers(90, 130))
    px = (IMAGE_SIZE - panel_w) // 2 + int(rng.integers(-16, 17))
    py = identity.header_height + int(rng.integers(14, 40))
    _rect(img, px - 2, py - 2, panel_w + 4, panel_h + 4, np.float32(0.72))
    _rect(img, px, py, panel_w, panel_h, np.float32(0.97))
    n_fields = int(rng.integers(2, 4))
    fy = py + 12
    for _ in range(n_fields):
        _rect(img, px + 10, fy, panel_w - 20, 12, np.float32(0.88))
        fy += 20
    button = identity.accent_color if rng.random() < 0.5 else identity.header_color
    _rect(img, px + 10, fy + 2, panel_w - 20, 14, button)
    _text_lines(img, rng, px + 10, py + panel_h + 8, panel_w - 20, 2, color=0.5)
    return img


def _finish(img: np.ndarray, rng: np.random.Generator, jitter: tuple[float, float]) -> np.ndarray:
    out = img * np.float32(rng.uniform(*jitter))
    return np.clip(out, 0.0, 1.0)


def _save(img: np.ndarray, path: Path) -> None:
    arr = np.round(img * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise IOError(f"could not write {path}")


def make_desk_corpus(
    root: str | Path,
    n_websites: int = 12,
    trusted_per_site: int = 20,
    phishing_total: int = 60,
    benign_total: int = 40,
    seed: int = 0,
) -> Path:
    """Generate a synthetic corpus under `root` and return the manifest path.

    Layout: root/images/*.png plus root/manifest.tsv.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    websites, records = [], []
    identities = []
    for i in range(n_websites):
        hue = (i + rng.uniform(-0.25, 0.25)) / n_websites
        identity = _SiteIdentity(rng, hue)
        identities.append(identity)
        wid = f"site{i:02d}"
        websites.append(
            WebsiteIdentity(
                website_id=wid,
                name=f"Example Site {i}",
                domains=(f"site{i:02d}.example",),
                category=_CATEGORIES[i % len(_CATEGORIES)],
            )
        )
        for j in range(trusted_per_site):
            rid = f"t-{i:02d}-{j:03d}"
            img = _finish(_draw_content_page(identity, rng), rng, TRUSTED_JITTER)
            path = root / "images" / f"{rid}.png"
            _save(img, path)
            records.append(
                Screenshot(
                    record_id=rid, image_path=path, source_class="trusted",
                    website_id=wid, url=f"https://site{i:02d}.example/page{j}",
                )
            )
    for j in range(phishing_total):
        i = j % n_websites
        rid = f"p-{i:02d}-{j:03d}"
        img = _finish(
            _draw_login_page(identities[i], rng, hue_jitter=0.02,
                             logo_jitter=LOGO_POSITION_JITTER),
            rng, PHISHING_JITTER,
        )
        path = root / "images" / f"{rid}.png"
        _save(img, path)
        records.append(
            Screenshot(
                record_id=rid, image_path=path, source_class="phishing",
                website_id=f"site{i:02d}", url=f"http://phish-{j}.example",
            )
        )
    for j in range(benign_total):
        hue = rng.uniform(0, 1)
        identity = _SiteIdentity(rng, hue)
        rid = f"b-{j:03d}"
        if j % 2 == 0:
            img = _draw_login_page(identity, rng, hue_jitter=0.0, logo_jitter=0)
        else:
            img = _draw_content_page(identity, rng)
        img = _finish(img, rng, BENIGN_JITTER)
        path = root / "images" / f"{rid}.png"
        _save(img, path)
        records.append(
            Screenshot(
                record_id=rid, image_path=path, source_class="benign_test",
                website_id=None, url=f"https://benign-{j}.example",
            )
        )
    manifest = CorpusManifest(websites=websites, records=records)
    manifest_path = root / "manifest.tsv"
    write_manifest(manifest, manifest_path)
    return manifest_path
