"""Screenshot corpus management: manifests, train/test splits, image loading,
near-duplicate detection, and optional live capture.

Manifest file format (UTF-8, tab-separated, one record per line)::

    # screenshot-manifest v1
    [websites]
    <website_id> TAB <name> TAB <domain,domain,...> TAB <category or ->
    [records]
    <record_id> TAB <website_id or -> TAB <source_class> TAB <image_path> TAB <url or ->

Blank lines and lines starting with ``#`` are ignored (except the version
header). Relative image paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import cv2
import numpy as np

IMAGE_SIZE = 224

SOURCE_CLASSES = ("trusted", "phishing", "benign_test")
SPLIT_NAMES = ("train", "test", "validation")

_MANIFEST_MAGIC = "# screenshot-manifest"
_SPLIT_MAGIC = "# split-assignment"


class CorpusError(ValueError):
    """Malformed manifest, record, split, or image."""


class CaptureError(RuntimeError):
    """Screenshot capture failed (navigation timeout, bad response, no backend)."""


@dataclass(frozen=True)
class WebsiteIdentity:
    """A protected website: stable id, display name, registrable domains."""

    website_id: str
    name: str
    domains: tuple[str, ...]
    category: str | None = None

    def __post_init__(self):
        if not self.domains:
            raise CorpusError(f"website {self.website_id!r} has no domains")


@dataclass(frozen=True)
class Screenshot:
    """One screenshot record. website_id is required for trusted/phishing
    records and absent for benign test pages."""

    record_id: str
    image_path: Path
    source_class: str
    website_id: str | None = None
    url: str | None = None
    capture_meta: Mapping[str, str] | None = None

    def __post_init__(self):
        if self.source_class not in SOURCE_CLASSES:
            raise CorpusError(
                f"record {self.record_id!r}: unknown source_class {self.source_class!r}"
            )
        if self.source_class in ("trusted", "phishing") and not self.website_id:
            raise CorpusError(
                f"{self.source_class} record {self.record_id!r} requires website_id"
            )


@dataclass
class CorpusManifest:
    """Validated collection of website identities and screenshot records."""

    websites: list[WebsiteIdentity]
    records: list[Screenshot]
    version: str = "v1"

    def __post_init__(self):
        seen_sites: dict[str, WebsiteIdentity] = {}
        for site in self.websites:
            if site.website_id in seen_sites:
                raise CorpusError(f"duplicate website_id {site.website_id!r}")
            seen_sites[site.website_id] = site
        seen_records: set[str] = set()
        for rec in self.records:
            if rec.record_id in seen_records:
                raise CorpusError(f"duplicate record_id {rec.record_id!r}")
            seen_records.add(rec.record_id)
            if rec.website_id is not None and rec.website_id not in seen_sites:
                raise CorpusError(
                    f"record {rec.record_id!r} references unknown website "
                    f"{rec.website_id!r}"
                )
        self._sites_by_id = seen_sites

    def website(self, website_id: str) -> WebsiteIdentity:
        return self._sites_by_id[website_id]

    def records_of(self, source_class: str) -> list[Screenshot]:
        return [r for r in self.records if r.source_class == source_class]

    def site_records(self, website_id: str) -> list[Screenshot]:
        return [r for r in self.records if r.website_id == website_id]


@dataclass(frozen=True)
class SplitAssignment:
    """record_id -> split name, plus the parameters that produced it."""

    assignment: Mapping[str, str]
    phishing_train_fraction: float
    validation_fraction: float
    seed: int

    def of(self, record_id: str) -> str:
        return self.assignment[record_id]

    def records(
        self,
        manifest: CorpusManifest,
        split: str,
        source_class: str | None = None,
    ) -> list[Screenshot]:
        out = []
        for rec in manifest.records:
            if self.assignment[rec.record_id] != split:
                continue
            if source_class is not None and rec.source_class != source_class:
                continue
            out.append(rec)
        return out


# ---------------------------------------------------------------------------
# Manifest IO


def _split_fields(line: str, lineno: int, where: str) -> list[str]:
    fields = [f.strip() for f in line.split("\t")]
    if any(not f for f in fields):
        raise CorpusError(f"{where}:{lineno}: empty field in {line!r}")
    return fields


def load_manifest(path: str | Path) -> CorpusManifest:
    """Parse and validate a manifest file; image paths become absolute."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    base = path.parent
    websites: list[WebsiteIdentity] = []
    records: list[Screenshot] = []
    version = None
    section = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith(_MANIFEST_MAGIC):
                version = line[len(_MANIFEST_MAGIC):].strip() or "v1"
            continue
        if line in ("[websites]", "[records]"):
            section = line[1:-1]
            continue
        if section == "websites":
            fields = _split_fields(line, lineno, str(path))
            if len(fields) != 4:
                raise CorpusError(
                    f"{path}:{lineno}: expected 4 website fields, got {len(fields)}"
                )
            wid, name, domains, category = fields
            websites.append(
                WebsiteIdentity(
                    website_id=wid,
                    name=name,
                    domains=tuple(d.strip() for d in domains.split(",") if d.strip()),
                    category=None if category == "-" else category,
                )
            )
        elif section == "records":
            fields = _split_fields(line, lineno, str(path))
            if len(fields) not in (4, 5):
                raise CorpusError(
                    f"{path}:{lineno}: expected 4-5 record fields, got {len(fields)}"
                )
            rid, wid, source_class, image_path = fields[:4]
            url = fields[4] if len(fields) == 5 else "-"
            img = Path(image_path)
            if not img.is_absolute():
                img = base / img
            try:
                records.append(
                    Screenshot(
                        record_id=rid,
                        image_path=img,
                        source_class=source_class,
                        website_id=None if wid == "-" else wid,
                        url=None if url == "-" else url,
                    )
                )
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
        else:
            raise CorpusError(f"{path}:{lineno}: data outside [websites]/[records]")
    if version is None:
        raise CorpusError(f"{path}: missing '{_MANIFEST_MAGIC}' header")
    try:
        return CorpusManifest(websites=websites, records=records, version=version)
    except CorpusError as exc:
        raise CorpusError(f"{path}: {exc}") from exc


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Write a manifest; image paths are stored relative to `path` when possible."""
    path = Path(path)
    base = path.parent.resolve()
    lines = [f"{_MANIFEST_MAGIC} {manifest.version}", "[websites]"]
    for site in manifest.websites:
        lines.append(
            "\t".join(
                [site.website_id, site.name, ",".join(site.domains), site.category or "-"]
            )
        )
    lines.append("[records]")
    for rec in manifest.records:
        img = Path(rec.image_path)
        try:
            img = img.resolve().relative_to(base)
        except ValueError:
            pass
        lines.append(
            "\t".join(
                [
                    rec.record_id,
                    rec.website_id or "-",
                    rec.source_class,
                    str(img),
                    rec.url or "-",
                ]
            )
        )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Splits


def split_corpus(
    manifest: CorpusManifest,
    phishing_train_fraction: float = 0.4,
    validation_fraction: float = 0.0,
    seed: int = 0,
) -> SplitAssignment:
    """Assign every record to train/test/validation.

    Trusted records always train. Phishing records are split per website:
    floor(fraction * n) of each website's pages go to train, the remainder to
    the hold-out pool. A website with a single phishing page keeps it in the
    hold-out regardless of the fraction, so the only evaluation item for that
    site never leaks into training. Hold-out phishing and benign_test records
    are then split into validation/test by validation_fraction. Deterministic
    given the seed.
    """
    if not 0.0 <= phishing_train_fraction <= 1.0:
        raise CorpusError(f"phishing_train_fraction out of [0,1]: {phishing_train_fraction}")
    if not 0.0 <= validation_fraction <= 1.0:
        raise CorpusError(f"validation_fraction out of [0,1]: {validation_fraction}")
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}

    phishing_by_site: dict[str, list[Screenshot]] = {}
    for rec in manifest.records:
        if rec.source_class == "trusted":
            assignment[rec.record_id] = "train"
        elif rec.source_class == "phishing":
            phishing_by_site.setdefault(rec.website_id, []).append(rec)

    holdout_phishing: list[Screenshot] = []
    for wid in sorted(phishing_by_site):
        recs = sorted(phishing_by_site[wid], key=lambda r: r.record_id)
        if len(recs) == 1:
            holdout_phishing.extend(recs)
            continue
        n_train = math.floor(phishing_train_fraction * len(recs))
        perm = rng.permutation(len(recs))
        for pos, idx in enumerate(perm):
            if pos < n_train:
                assignment[recs[idx].record_id] = "train"
            else:
                holdout_phishing.append(recs[idx])

    benign = sorted(manifest.records_of("benign_test"), key=lambda r: r.record_id)
    for group in (holdout_phishing, benign):
        n_val = math.floor(validation_fraction * len(group))
        perm = rng.permutation(len(group))
        for pos, idx in enumerate(perm):
            assignment[group[idx].record_id] = "validation" if pos < n_val else "test"

    return SplitAssignment(
        assignment=assignment,
        phishing_train_fraction=phishing_train_fraction,
        validation_fraction=validation_fraction,
        seed=seed,
    )


def write_split(split: SplitAssignment, path: str | Path) -> None:
    path = Path(path)
    lines = [
        f"{_SPLIT_MAGIC} v1",
        f"# phishing_train_fraction\t{split.phishing_train_fraction!r}",
        f"# validation_fraction\t{split.validation_fraction!r}",
        f"# seed\t{split.seed}",
    ]
    for rid in sorted(split.assignment):
        lines.append(f"{rid}\t{split.assignment[rid]}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_split(path: str | Path) -> SplitAssignment:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"split file not found: {path}")
    assignment: dict[str, str] = {}
    params: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(_SPLIT_MAGIC):
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("\t")
            params[key.strip()] = value.strip()
            continue
        rid, _, name = line.partition("\t")
        if name not in SPLIT_NAMES:
            raise CorpusError(f"{path}:{lineno}: unknown split {name!r}")
        assignment[rid] = name
    return SplitAssignment(
        assignment=assignment,
        phishing_train_fraction=float(params.get("phishing_train_fraction", "nan")),
        validation_fraction=float(params.get("validation_fraction", "nan")),
        seed=int(params.get("seed", "0")),
    )


# ---------------------------------------------------------------------------
# Image loading


def load_image(record: Screenshot | str | Path) -> np.ndarray:
    """Load a screenshot as a float32 (224, 224, 3) RGB array in [0, 1].

    Grayscale inputs are replicated to 3 channels; other sizes are resized
    with a plain bilinear resample (aspect ratio not preserved). Idempotent
    on inputs that are already 224x224.
    """
    path = Path(record.image_path if isinstance(record, Screenshot) else record)
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise CorpusError(f"unreadable or corrupt image: {path}")
    img = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    if img.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        img = cv2.resize(img, (IMAGE_SIZE, IMAGE_SIZE), interpolation=cv2.INTER_LINEAR)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Near-duplicate detection


@dataclass(frozen=True)
class DuplicateReport:
    """Pairs closer than the threshold in feature space, grouped into
    connected components. The suggested canonical record of a component is
    its lowest record_id (= first member; components store sorted ids)."""

    pairs: tuple[tuple[str, str, float], ...]
    components: tuple[tuple[str, ...], ...]
    threshold: float

    @property
    def canonical_records(self) -> tuple[str, ...]:
        return tuple(comp[0] for comp in self.components)


def near_duplicate_scan(
    records: Sequence[Screenshot],
    feature_fn: Callable[[np.ndarray], np.ndarray],
    threshold: float | None = None,
) -> DuplicateReport:
    """Flag record pairs whose feature-space L2 distance is below threshold.

    feature_fn maps a loaded image to a 1-D feature vector and must be
    deterministic. With threshold=None, the threshold defaults to the 1st
    percentile of the observed cross-website distances. Output is independent
    of the input record order.
    """
    recs = sorted(records, key=lambda r: r.record_id)
    if not recs:
        return DuplicateReport(pairs=(), components=(), threshold=float(threshold or 0.0))
    feats = np.stack(
        [np.asarray(feature_fn(load_image(r)), dtype=np.float64).ravel() for r in recs]
    )
    n = len(recs)
    dists = np.sqrt(((feats[:, None, :] - feats[None, :, :]) ** 2).sum(axis=2))

    if threshold is None:
        cross = []
        for i in range(n):
            for j in range(i + 1, n):
                # records without a website count as distinct sites
                wi, wj = recs[i].website_id, recs[j].website_id
                if wi is None or wj is None or wi != wj:
                    cross.append(dists[i, j])
        if not cross:
            raise CorpusError("cannot derive default threshold: no cross-website pairs")
        threshold = float(np.percentile(cross, 1.0))

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if dists[i, j] < threshold:
                pairs.append((recs[i].record_id, recs[j].record_id, float(dists[i, j])))
                parent[find(i)] = find(j)

    groups: dict[int, list[str]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(recs[i].record_id)
    components = tuple(
        tuple(sorted(members))
        for _, members in sorted(groups.items(), key=lambda kv: min(kv[1]))
        if len(members) > 1
    )
    return DuplicateReport(pairs=tuple(pairs), components=components, threshold=float(threshold))


def write_duplicate_report(report: DuplicateReport, path: str | Path) -> None:
    path = Path(path)
    lines = ["# duplicate-report v1", f"# threshold\t{report.threshold!r}"]
    for comp in report.components:
        lines.append("component\t" + comp[0] + "\t" + ",".join(comp))
    for rid_i, rid_j, dist in report.pairs:
        lines.append(f"pair\t{rid_i}\t{rid_j}\t{dist!r}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Live capture (optional; every other operation consumes manifests)

_url_locks: dict[str, threading.Lock] = {}
_url_locks_guard = threading.Lock()


def _lock_for(url: str) -> threading.Lock:
    with _url_locks_guard:
        return _url_locks.setdefault(url, threading.Lock())


class PlaywrightBackend:
    """Headless-browser capture backend backed by playwright (if installed)."""

    name = "playwright-chromium"

    def __init__(self, timeout_s: float = 30.0):
        self.timeout_s = timeout_s

    def capture(self, url: str, width: int, height: int) -> np.ndarray:
        try:
            from playwright.sync_api import sync_playwright
        except ImportError as exc:
            raise CaptureError(
                "playwright is not installed; install it or supply another backend"
            ) from exc
        with sync_playwright() as pw:
            browser = pw.chromium.launch()
            try:
                page = browser.new_page(viewport={"width": width, "height": height})
                resp = page.goto(url, timeout=self.timeout_s * 1000)
                if resp is not None and "text/html" not in (
                    resp.headers.get("content-type", "text/html")
                ):
                    raise CaptureError(f"non-HTML response for {url}")
                png = page.screenshot()
            except CaptureError:
                raise
            except Exception as exc:
                raise CaptureError(f"capture failed for {url}: {exc}") from exc
            finally:
                browser.close()
        buf = np.frombuffer(png, dtype=np.uint8)
        img = cv2.imdecode(buf, cv2.IMREAD_COLOR)
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def capture_screenshot(
    url: str,
    viewport: tuple[int, int],
    backend,
    out_dir: str | Path,
    record_id: str,
    source_class: str = "benign_test",
    website_id: str | None = None,
) -> Screenshot:
    """Render `url` at a fixed viewport and save a lossless PNG.

    `backend.capture(url, width, height)` must return an RGB uint8 array and
    raise CaptureError on timeout or non-HTML responses. Captures of the same
    URL are serialized (single-flight per URL).
    """
    if backend is None:
        raise CaptureError("no capture backend configured")
    width, height = viewport
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _lock_for(url):
        try:
            img = backend.capture(url, width, height)
        except CaptureError:
            raise
        except Exception as exc:
            raise CaptureError(f"capture failed for {url}: {exc}") from exc
    img = np.asarray(img, dtype=np.uint8)
    path = out_dir / f"{record_id}.png"
    ok = cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    if not ok:
        raise CaptureError(f"failed to write screenshot for {url} to {path}")
    return Screenshot(
        record_id=record_id,
        image_path=path,
        source_class=source_class,
        website_id=website_id,
        url=url,
        capture_meta={
            "backend": getattr(backend, "name", type(backend).__name__),
            "viewport": f"{width}x{height}",
        },
    )
