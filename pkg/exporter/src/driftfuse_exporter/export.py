"""Walk a per-domain/per-class image tree and write a DIFZ feature file.

The DIFZ layout is implemented here independently of the consuming engine
so the file format itself is the contract between the two sides:

    magic "DIFZ" | version u16 (=1) | feature_dim u32 | num_classes u32 |
    record_count u64 | records of [feature: feature_dim x f32 | label u32 |
    domain u16], all little-endian.

Labels come from the sorted union of class-folder names, domain ids from
the sorted domain-folder order; both are stable under re-export. Features
are stored exactly as the backbone emits them (no normalization).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbones import DEFAULT_BACKBONE, ImageBackbone, get_backbone

__all__ = ["ExportJob", "ExportResult", "ExportError", "export_features"]

MAGIC = b"DIFZ"
VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


class ExportError(RuntimeError):
    """Invalid dataset layout."""


@dataclass
class ExportJob:
    dataset_root: str
    output_path: str
    backbone: str = DEFAULT_BACKBONE
    prompt_template: str = "a good photo of [CLS]"
    batch_size: int = 32


@dataclass
class ExportResult:
    records: int
    feature_dim: int
    num_classes: int
    domains: list[str]
    classes: list[str]
    skipped: int = 0
    warnings: list[str] = field(default_factory=list)


def _list_dirs(path: str) -> list[str]:
    return sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))


def _list_images(path: str) -> list[str]:
    return sorted(
        f for f in os.listdir(path)
        if os.path.splitext(f)[1].lower() in IMAGE_EXTENSIONS
        and os.path.isfile(os.path.join(path, f))
    )


def _scan_tree(root: str) -> tuple[list[str], list[str]]:
    if not os.path.isdir(root):
        raise ExportError(f"dataset root {root!r} is not a directory")
    domains = _list_dirs(root)
    if not domains:
        raise ExportError(f"{root}: no domain folders")
    classes: set[str] = set()
    for domain in domains:
        domain_dir = os.path.join(root, domain)
        class_dirs = _list_dirs(domain_dir)
        if not class_dirs:
            raise ExportError(f"{domain_dir}: domain has no class folders")
        for cls in class_dirs:
            if not _list_images(os.path.join(domain_dir, cls)):
                raise ExportError(f"{os.path.join(domain_dir, cls)}: class folder has no images")
            classes.add(cls)
    return domains, sorted(classes)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".export-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_batches(backbone: ImageBackbone, paths: list[str], batch_size: int,
                    result: ExportResult) -> tuple[np.ndarray, list[int]]:
    feats: list[np.ndarray] = []
    kept: list[int] = []
    batch_imgs: list[Image.Image] = []
    batch_idx: list[int] = []

    def flush():
        if batch_imgs:
            feats.append(backbone.encode(batch_imgs))
            kept.extend(batch_idx)
            for img in batch_imgs:
                img.close()
            batch_imgs.clear()
            batch_idx.clear()

    for i, path in enumerate(paths):
        try:
            img = Image.open(path)
            img.load()
        except (OSError, UnidentifiedImageError) as exc:
            result.skipped += 1
            result.warnings.append(f"skipped unreadable image {path}: {exc}")
            continue
        batch_imgs.append(img)
        batch_idx.append(i)
        if len(batch_imgs) >= batch_size:
            flush()
    flush()
    if feats:
        return np.concatenate(feats, axis=0), kept
    return np.zeros((0, backbone.embed_dim), dtype=np.float32), kept


def export_features(job: ExportJob) -> ExportResult:
    """Encode every image in the tree and write the DIFZ file + manifest."""
    domains, classes = _scan_tree(job.dataset_root)
    backbone = get_backbone(job.backbone)
    class_index = {name: i for i, name in enumerate(classes)}

    result = ExportResult(0, backbone.embed_dim, len(classes), domains, classes)
    all_feats: list[np.ndarray] = []
    labels: list[int] = []
    domain_ids: list[int] = []
    for d_id, domain in enumerate(domains):
        domain_dir = os.path.join(job.dataset_root, domain)
        for cls in _list_dirs(domain_dir):
            paths = [os.path.join(domain_dir, cls, f) for f in _list_images(os.path.join(domain_dir, cls))]
            feats, kept = _encode_batches(backbone, paths, job.batch_size, result)
            all_feats.append(feats)
            labels.extend([class_index[cls]] * len(kept))
            domain_ids.extend([d_id] * len(kept))

    features = np.concatenate(all_feats, axis=0).astype("<f4") if all_feats else \
        np.zeros((0, backbone.embed_dim), dtype="<f4")
    n = features.shape[0]
    result.records = n

    record = np.dtype([("feature", "<f4", (backbone.embed_dim,)), ("label", "<u4"), ("domain", "<u2")])
    records = np.empty(n, dtype=record)
    records["feature"] = features
    records["label"] = np.asarray(labels, dtype="<u4")
    records["domain"] = np.asarray(domain_ids, dtype="<u2")
    header = _HEADER.pack(MAGIC, VERSION, backbone.embed_dim, len(classes), n)
    _atomic_write(job.output_path, header + records.tobytes())

    manifest = [
        f"# backbone: {backbone.name} (embed_dim {backbone.embed_dim})",
        f"# prompt: {job.prompt_template}",
        f"# classes: {','.join(classes)}",
    ] + domains
    _atomic_write(job.output_path + ".manifest", ("\n".join(manifest) + "\n").encode("utf-8"))
    return result
