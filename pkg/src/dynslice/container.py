"""On-disk model format: ``<name>.json`` manifest plus ``<name>.bin`` blob.

The manifest holds ``format_version``, ``kind``, ``config`` and a ``tensors``
table of ``{name, dtype, shape, offset}``. The blob is the little-endian
float32 row-major bytes of every tensor, concatenated in table order with no
padding. Sliced models add ``widths`` and ``provenance`` keys.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError
from .model import BLOCK_TENSORS, Block, ModelConfig, TransformerModel

FORMAT_VERSION = 1
_DTYPE = "float32"


def _stem_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def save_model(model, path) -> Path:
    """Write ``model`` next to ``path`` and return the manifest path."""
    manifest_path, blob_path = _stem_paths(path)
    table, chunks, offset = [], [], 0
    for name, arr in model.tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(data)):
            raise FormatError(f"tensor {name} has non-finite entries")
        raw = data.tobytes(order="C")
        table.append({"name": name, "dtype": _DTYPE, "shape": list(data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "blob": blob_path.name,
        "blob_bytes": offset,
        "tensors": table,
    }
    if model.kind == "sliced":
        manifest["widths"] = [int(k) for k in model.widths]
    if model.metadata:
        manifest["provenance"] = model.metadata
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_bytes(manifest_bytes(manifest))
    return manifest_path


def expected_shapes(kind: str, config: ModelConfig, widths=None) -> dict:
    c = config
    d, f = c.d_model, c.d_ff
    shapes = {"token_embedding": (c.vocab_size, d)}
    if kind == "sliced":
        if widths is None or len(widths) != c.n_layers:
            raise FormatError("sliced manifest needs one width per block")
        ws = [int(k) for k in widths]
        shapes["embedding_projector"] = (d, ws[0] if ws else d)
    else:
        ws = [d] * c.n_layers
    for i, k in enumerate(ws):
        shapes.update({
            f"blocks.{i}.attn_norm": (k,), f"blocks.{i}.wq": (k, d), f"blocks.{i}.wk": (k, d),
            f"blocks.{i}.wv": (k, d), f"blocks.{i}.wo": (d, k), f"blocks.{i}.mlp_norm": (k,),
            f"blocks.{i}.w_up": (k, f), f"blocks.{i}.w_down": (f, k),
        })
    if kind == "sliced":
        for i in range(len(ws) - 1):
            shapes[f"adapters.{i}"] = (ws[i], ws[i + 1])
        shapes["head_reconstructor"] = (ws[-1] if ws else d, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, c.vocab_size)
    return shapes


def load_model(manifest_path):
    """Load a TransformerModel or SlicedModel from its manifest."""
    manifest_path, default_blob = _stem_paths(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"manifest {manifest_path} not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    kind = manifest.get("kind", "transformer")
    if kind not in ("transformer", "sliced"):
        raise FormatError(f"unknown model kind {kind!r}")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except KeyError:
        raise FormatError("manifest has no config") from None
    except PreconditionError as e:
        raise PreconditionError(f"invalid config in {manifest_path}: {e}") from None

    blob_path = manifest_path.parent / manifest.get("blob", default_blob.name)
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"blob {blob_path} not found") from None

    expect = expected_shapes(kind, config, manifest.get("widths"))
    tensors, spans = {}, []
    for entry in manifest.get("tensors", []):
        name = entry.get("name")
        if name in tensors:
            raise FormatError(f"tensor {name} listed twice")
        if name not in expect:
            raise FormatError(f"tensor {name} is not part of the architecture")
        if entry.get("dtype") != _DTYPE:
            raise FormatError(f"tensor {name} has unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        if shape != expect[name]:
            raise FormatError(f"tensor {name} has shape {shape}, expected {expect[name]}")
        offset = int(entry["offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + nbytes > len(blob):
            raise FormatError(f"tensor {name} runs past the end of the blob (truncated?)")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"tensor {n1} overlaps tensor {n0} in the blob")
    missing = [n for n in expect if n not in tensors]
    if missing:
        raise FormatError(f"tensor {missing[0]} missing from manifest")

    blocks = tuple(
        Block(**{k: tensors[f"blocks.{i}.{k}"] for k in BLOCK_TENSORS}) for i in range(config.n_layers)
    )
    meta = manifest.get("provenance", {})
    if kind == "transformer":
        return TransformerModel(
            config=config,
            token_embedding=tensors["token_embedding"],
            blocks=blocks,
            final_norm=tensors["final_norm"],
            lm_head=tensors["lm_head"],
            metadata=meta,
        )
    from .slicer import SlicedModel

    return SlicedModel(
        config=config,
        widths=tuple(int(k) for k in manifest["widths"]),
        token_embedding=tensors["token_embedding"],
        embedding_projector=tensors["embedding_projector"],
        blocks=blocks,
        adapters=tuple(tensors[f"adapters.{i}"] for i in range(config.n_layers - 1)),
        head_reconstructor=tensors["head_reconstructor"],
        final_norm=tensors["final_norm"],
        lm_head=tensors["lm_head"],
        metadata=meta,
    )
