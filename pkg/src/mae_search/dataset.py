"""On-disk dataset layout.

::

    <dir>/dataset.json            manifest (schema version, K, identities, splits, checksums)
    <dir>/images/<scene>.png      RGB image
    <dir>/labels/<scene>.png      indexed PNG, palette index = attribute id (1..5), 0 = none
    <dir>/masks/<scene>.png       indexed PNG global foreground mask (0/1)
    <dir>/annotations/<scene>.json  boxes, identities, part layout, appearance, split

Each scene's SHA-256 (over its four files, in the order above) is kept in
the manifest and verified on read.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import (
    NUM_BASE,
    Box,
    PersonAppearance,
    PersonInstance,
    SceneConfig,
    SceneSample,
    make_identity_pool,
    render_scene,
)

SCHEMA_VERSION = 1
MANIFEST = "dataset.json"


class DatasetError(Exception):
    pass


class DatasetNotFoundError(DatasetError, FileNotFoundError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetCorruptError(DatasetError):
    pass


_LABEL_PALETTE = [0, 0, 0, 230, 190, 140, 200, 40, 40, 40, 70, 200, 90, 90, 90, 150, 60, 180]


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def encode_image(image: np.ndarray) -> bytes:
    return _png_bytes(Image.fromarray(np.ascontiguousarray(image.transpose(1, 2, 0)), mode="RGB"))


def encode_index_map(index: np.ndarray, palette: list[int]) -> bytes:
    img = Image.fromarray(index.astype(np.uint8), mode="P")
    img.putpalette(palette + [0] * (768 - len(palette)))
    return _png_bytes(img)


def labels_to_index(label_map: np.ndarray) -> np.ndarray:
    if np.any(label_map.sum(axis=0) > 1):
        raise ValueError("label channels overlap; cannot encode as an index map")
    index = np.zeros(label_map.shape[1:], dtype=np.uint8)
    for a in range(label_map.shape[0]):
        index[label_map[a] > 0] = a + 1
    return index


def index_to_labels(index: np.ndarray, k: int = NUM_BASE) -> np.ndarray:
    return np.stack([(index == a + 1) for a in range(k)]).astype(np.uint8)


def _decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            return np.array(img)
    except Exception as exc:  # PIL raises a zoo of types on damaged input
        raise DatasetCorruptError(f"cannot decode PNG: {exc}") from exc


def _annotation(sample: SceneSample) -> dict:
    return {
        "scene_id": sample.scene_id,
        "split": sample.split,
        "height": sample.height,
        "width": sample.width,
        "persons": [
            {
                "identity": p.identity,
                "box": list(p.box.as_tuple()),
                "appearance": p.appearance.to_json(),
                "part_layout": [[list(r) for r in rects] for rects in p.part_layout],
                "skin_layout": [list(r) for r in p.skin_layout],
                "visibility": list(p.visibility),
            }
            for p in sample.persons
        ],
    }


def _person_from_json(d: dict) -> PersonInstance:
    return PersonInstance(
        identity=int(d["identity"]),
        box=Box(*d["box"]),
        appearance=PersonAppearance.from_json(d["appearance"]),
        part_layout=[[tuple(r) for r in rects] for rects in d["part_layout"]],
        skin_layout=[tuple(r) for r in d["skin_layout"]],
        visibility=[bool(v) for v in d["visibility"]],
    )


def _scene_files(sample: SceneSample) -> dict[str, bytes]:
    ann = json.dumps(_annotation(sample), indent=1, sort_keys=True).encode()
    return {
        f"images/{sample.scene_id}.png": encode_image(sample.image),
        f"labels/{sample.scene_id}.png": encode_index_map(labels_to_index(sample.label_map), _LABEL_PALETTE),
        f"masks/{sample.scene_id}.png": encode_index_map(sample.global_mask[0], [0, 0, 0, 255, 255, 255]),
        f"annotations/{sample.scene_id}.json": ann,
    }


def _digest(parts: list[bytes]) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(8, "little"))
        h.update(p)
    return h.hexdigest()


def write_dataset(samples: list[SceneSample], root, *, identities: int, k: int = 5, extra: dict | None = None) -> Path:
    """Write ``samples`` under ``root`` and return the manifest path."""
    root = Path(root)
    for sub in ("images", "labels", "masks", "annotations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    checksums = {}
    splits: dict[str, list[str]] = {"train": [], "test": []}
    for s in samples:
        files = _scene_files(s)
        for rel, data in files.items():
            (root / rel).write_bytes(data)
        checksums[s.scene_id] = _digest(list(files.values()))
        splits.setdefault(s.split, []).append(s.scene_id)
    manifest = {
        "version": SCHEMA_VERSION,
        "K": k,
        "identities": identities,
        "attributes": ["head", "upper-clothes", "lower-clothes", "shoes", "bag"],
        "splits": splits,
        "checksums": checksums,
        **(extra or {}),
    }
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root) -> dict:
    root = Path(root)
    path = root / MANIFEST
    if not root.is_dir() or not path.is_file():
        raise DatasetNotFoundError(f"no dataset manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetCorruptError(f"manifest {path} is not valid JSON") from exc
    if manifest.get("version") != SCHEMA_VERSION:
        raise DatasetVersionError(
            f"dataset schema version {manifest.get('version')!r}, expected {SCHEMA_VERSION}"
        )
    return manifest


def read_scene(root, scene_id: str, expected_digest: str | None = None) -> SceneSample:
    root = Path(root)
    rels = [
        f"images/{scene_id}.png",
        f"labels/{scene_id}.png",
        f"masks/{scene_id}.png",
        f"annotations/{scene_id}.json",
    ]
    try:
        blobs = [(root / r).read_bytes() for r in rels]
    except FileNotFoundError as exc:
        raise DatasetNotFoundError(f"missing file for scene {scene_id}: {exc.filename}") from exc
    if expected_digest is not None and _digest(blobs) != expected_digest:
        raise DatasetCorruptError(f"checksum mismatch for scene {scene_id}")
    image = _decode_png(blobs[0]).transpose(2, 0, 1)
    labels = index_to_labels(_decode_png(blobs[1]))
    mask = (_decode_png(blobs[2]) > 0).astype(np.uint8)[None]
    try:
        ann = json.loads(blobs[3])
    except json.JSONDecodeError as exc:
        raise DatasetCorruptError(f"annotation for {scene_id} is not valid JSON") from exc
    persons = [_person_from_json(p) for p in ann["persons"]]
    return SceneSample(
        ann["scene_id"], ann["split"], np.ascontiguousarray(image), persons, labels, mask
    )


def read_dataset(root, split: str | None = None) -> list[SceneSample]:
    """Load every scene (or one split), verifying per-scene checksums."""
    manifest = read_manifest(root)
    splits = [split] if split else sorted(manifest["splits"])
    out = []
    for name in splits:
        for sid in manifest["splits"].get(name, []):
            out.append(read_scene(root, sid, manifest["checksums"].get(sid)))
    return out


def synthesize(
    n_identities: int,
    train_scenes: int,
    test_scenes: int,
    seed: int,
    cfg: SceneConfig | None = None,
) -> list[SceneSample]:
    """Render a train/test dataset; every identity appears in at least two test scenes."""
    cfg = cfg or SceneConfig()
    pool = make_identity_pool(n_identities, seed)
    samples = []
    for i in range(train_scenes):
        samples.append(render_scene(cfg, pool, [seed, 0, i], f"train_{i:04d}", "train"))
    for i in range(test_scenes):
        forced = None
        if i < 2 * n_identities and cfg.max_persons >= 1:
            # the first scenes guarantee coverage: identity i % n, then random companions
            rng = np.random.default_rng([seed, 2, i])
            count = int(rng.integers(max(1, cfg.min_persons), cfg.max_persons + 1))
            others = [int(j) for j in rng.permutation(n_identities) if j != i % n_identities]
            forced = [i % n_identities] + others[: count - 1]
        samples.append(render_scene(cfg, pool, [seed, 1, i], f"test_{i:04d}", "test", identities=forced))
    return samples
