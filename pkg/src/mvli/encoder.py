"""Query and document encoders.

Backbone features are frozen deterministic stubs (or file-backed, precomputed
vectors); the trainable surface is the projection MLPs, one cross-attention
transformer block, the entity token embedding, and a null-text token.

Every forward helper returns a cache alongside its output so the training
module can run reverse-mode differentiation through the exact same code path.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .augment import AugmentedDocument
from .core import (
    ConfigError,
    CorruptionError,
    DocumentError,
    FeatureSet,
    InputError,
    MissingEmbeddingError,
    NumericError,
    Rng,
    SpanError,
    seeded_unit_vector,
    tokenize,
)

# ---------------------------------------------------------------------------
# Configuration and parameters.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    """Engine shape configuration.

    dim is the shared output embedding dimension (16 at desk scale, 128 for
    full-size runs).  n_mm_tokens is the number of fused multimodal tokens
    emitted per image (32 full-size, 4 in fast tests).
    """

    dim: int = 16
    text_dim: int = 64
    image_dim: int = 64
    n_patches: int = 9
    n_heads: int = 4
    attn_dim: int = 64
    ff_dim: int | None = None
    n_mm_tokens: int = 32

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        for name in ("text_dim", "image_dim", "n_patches", "n_heads", "attn_dim", "n_mm_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.attn_dim % self.n_heads != 0:
            raise ConfigError("attn_dim must be divisible by n_heads")
        if self.ff_dim is not None and self.ff_dim < 1:
            raise ConfigError("ff_dim must be >= 1")

    @property
    def ffn_dim(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 2 * self.attn_dim


@dataclass(frozen=True)
class EncoderFlags:
    """Document-encoder ablation switches.

    mi: attach related-entity images (not just the main image).
    mmf: compute fused multimodal tokens for related images.
    ete: add the entity token embedding to each image's entity span before
        cross-attention.
    """

    mi: bool = True
    mmf: bool = True
    ete: bool = True

    def label(self) -> str:
        parts = [name.upper() for name in ("mi", "mmf", "ete") if getattr(self, name)]
        return "+".join(parts) if parts else "none"

    @staticmethod
    def parse(text: str) -> "EncoderFlags":
        cleaned = text.strip().lower()
        if cleaned in ("", "none"):
            return EncoderFlags(False, False, False)
        wanted = {part.strip() for part in cleaned.replace("+", ",").split(",") if part.strip()}
        unknown = wanted - {"mi", "mmf", "ete"}
        if unknown:
            raise ConfigError(f"unknown encoder flags: {sorted(unknown)}")
        return EncoderFlags("mi" in wanted, "mmf" in wanted, "ete" in wanted)


ABLATION_ROWS: tuple[EncoderFlags, ...] = (
    EncoderFlags(False, False, False),
    EncoderFlags(True, False, False),
    EncoderFlags(True, True, False),
    EncoderFlags(True, True, True),
)


@dataclass
class MlpParams:
    """Two-layer projection with a smooth GELU nonlinearity."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class AttnParams:
    """One cross-attention transformer block (no normalization layers).

    The query map doubles as the input projection, so the residual around the
    attention sublayer is well defined for any patch dimension.
    """

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    f1: np.ndarray
    f1b: np.ndarray
    f2: np.ndarray
    f2b: np.ndarray


@dataclass
class EncoderParams:
    text_proj: MlpParams
    global_proj: MlpParams
    xattn: AttnParams
    mm_proj: MlpParams
    ete: np.ndarray
    null_text: np.ndarray


def _init_matrix(rng: Rng, name: str, rows: int, cols: int) -> np.ndarray:
    gen = rng.split(name).generator()
    return gen.standard_normal((rows, cols)) / math.sqrt(rows)


def _init_mlp(rng: Rng, name: str, d_in: int, d_out: int, hidden: int | None = None) -> MlpParams:
    width = hidden if hidden is not None else 2 * d_out
    return MlpParams(
        w1=_init_matrix(rng, name + ".w1", d_in, width),
        b1=np.zeros(width),
        w2=_init_matrix(rng, name + ".w2", width, d_out),
        b2=np.zeros(d_out),
    )


def init_encoder_params(config: EncoderConfig, seed: int) -> EncoderParams:
    rng = Rng(seed).split("encoder-init")
    c = config
    xattn = AttnParams(
        wq=_init_matrix(rng, "xattn.wq", c.image_dim, c.attn_dim),
        bq=np.zeros(c.attn_dim),
        wk=_init_matrix(rng, "xattn.wk", c.text_dim, c.attn_dim),
        bk=np.zeros(c.attn_dim),
        wv=_init_matrix(rng, "xattn.wv", c.text_dim, c.attn_dim),
        bv=np.zeros(c.attn_dim),
        wo=_init_matrix(rng, "xattn.wo", c.attn_dim, c.attn_dim),
        bo=np.zeros(c.attn_dim),
        f1=_init_matrix(rng, "xattn.f1", c.attn_dim, c.ffn_dim),
        f1b=np.zeros(c.ffn_dim),
        f2=_init_matrix(rng, "xattn.f2", c.ffn_dim, c.attn_dim),
        f2b=np.zeros(c.attn_dim),
    )
    return EncoderParams(
        text_proj=_init_mlp(rng, "text_proj", c.text_dim, c.dim),
        global_proj=_init_mlp(rng, "global_proj", c.image_dim, c.dim),
        xattn=xattn,
        mm_proj=_init_mlp(rng, "mm_proj", c.n_patches * c.attn_dim, c.n_mm_tokens * c.dim),
        ete=rng.split("ete").generator().standard_normal(c.text_dim) * 0.02,
        null_text=rng.split("null_text").generator().standard_normal(c.text_dim) * 0.02,
    )


_MLP_FIELDS = ("w1", "b1", "w2", "b2")
_ATTN_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "f1", "f1b", "f2", "f2b")


def named_tensors(params: EncoderParams) -> dict[str, np.ndarray]:
    """Stable name -> array views over every trainable tensor."""
    out: dict[str, np.ndarray] = {}
    for block in ("text_proj", "global_proj", "mm_proj"):
        mlp = getattr(params, block)
        for f in _MLP_FIELDS:
            out[f"{block}.{f}"] = getattr(mlp, f)
    for f in _ATTN_FIELDS:
        out[f"xattn.{f}"] = getattr(params.xattn, f)
    out["ete"] = params.ete
    out["null_text"] = params.null_text
    return out


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in named_tensors(params).items()}


def copy_params(params: EncoderParams) -> EncoderParams:
    def _mlp(m: MlpParams) -> MlpParams:
        return MlpParams(m.w1.copy(), m.b1.copy(), m.w2.copy(), m.b2.copy())

    xa = params.xattn
    return EncoderParams(
        text_proj=_mlp(params.text_proj),
        global_proj=_mlp(params.global_proj),
        xattn=AttnParams(*[getattr(xa, f).copy() for f in _ATTN_FIELDS]),
        mm_proj=_mlp(params.mm_proj),
        ete=params.ete.copy(),
        null_text=params.null_text.copy(),
    )


def params_checksum(params: EncoderParams) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name, arr in sorted(named_tensors(params).items()):
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def check_params_finite(params: EncoderParams) -> None:
    for name, arr in named_tensors(params).items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in parameter tensor {name!r}")


# ---------------------------------------------------------------------------
# Parameter checkpoint file: magic "MPRM", version, encoder shape header,
# then a tensor table of (name, shape, float64 values), all little-endian.
# ---------------------------------------------------------------------------

_PARAMS_MAGIC = b"MPRM"
_PARAMS_VERSION = 1


def save_params(params: EncoderParams, config: EncoderConfig, path: str | Path) -> None:
    tensors = named_tensors(params)
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<I", _PARAMS_VERSION))
        fh.write(struct.pack(
            "<8I", config.dim, config.text_dim, config.image_dim, config.n_patches,
            config.n_heads, config.attn_dim, config.ffn_dim, config.n_mm_tokens,
        ))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptionError("checkpoint file is truncated")
    return data


def load_params(path: str | Path) -> tuple[EncoderParams, EncoderConfig]:
    from .core import FormatError, UnsupportedVersionError

    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _PARAMS_MAGIC:
            raise FormatError(f"{path}: not a parameter checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _PARAMS_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
        dims = struct.unpack("<8I", _read_exact(fh, 32))
        config = EncoderConfig(
            dim=dims[0], text_dim=dims[1], image_dim=dims[2], n_patches=dims[3],
            n_heads=dims[4], attn_dim=dims[5], ff_dim=dims[6], n_mm_tokens=dims[7],
        )
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape)
            tensors[name] = data.copy()
        if fh.read(1):
            raise CorruptionError(f"{path}: trailing bytes after tensor table")

    params = init_encoder_params(config, seed=0)
    views = named_tensors(params)
    if set(views) != set(tensors):
        raise CorruptionError(f"{path}: tensor table does not match the expected layout")
    for name, arr in tensors.items():
        if views[name].shape != arr.shape:
            raise CorruptionError(f"{path}: tensor {name!r} has shape {arr.shape}")
        views[name][...] = arr
    return params, config


# ---------------------------------------------------------------------------
# Backbone feature stubs and providers.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextFeatures:
    tokens: tuple[str, ...]
    embeddings: np.ndarray  # (N_t, text_dim)


@dataclass(frozen=True)
class ImageFeatures:
    global_vec: np.ndarray  # (image_dim,)
    patches: np.ndarray  # (n_patches, image_dim)


@dataclass(frozen=True)
class QueryInput:
    text: str
    image_key: str


class SeededEmbeddingProvider:
    """Deterministic stand-in for frozen text/image backbones."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def _vector(self, domain: str, key: str, dim: int) -> np.ndarray:
        cached = self._cache.get((domain, key))
        if cached is None:
            cached = seeded_unit_vector(key, dim, domain)
            cached.flags.writeable = False
            self._cache[(domain, key)] = cached
        return cached

    def text_vector(self, token: str) -> np.ndarray:
        return self._vector("text", token, self.config.text_dim)

    def image_global(self, image_key: str) -> np.ndarray:
        return self._vector("img-g", image_key, self.config.image_dim)

    def image_patch(self, image_key: str, patch_index: int) -> np.ndarray:
        return self._vector("img-p", f"{image_key}:{patch_index}", self.config.image_dim)


class FileEmbeddingProvider:
    """Precomputed backbone features from a binary record file.

    Record layout (little-endian): key length u32, key bytes (UTF-8), dim u32,
    then dim float32 values.  Keys follow the convention "text:<token>",
    "img-g:<image key>", "img-p:<patch index>:<image key>".
    """

    def __init__(self, path: str | Path, config: EncoderConfig):
        self.config = config
        self.records = read_embedding_file(path)

    def _lookup(self, key: str, dim: int) -> np.ndarray:
        vec = self.records.get(key)
        if vec is None:
            raise MissingEmbeddingError(f"no embedding record for key {key!r}")
        if vec.shape[0] != dim:
            raise CorruptionError(
                f"embedding {key!r} has dim {vec.shape[0]}, expected {dim}"
            )
        return vec

    def text_vector(self, token: str) -> np.ndarray:
        return self._lookup(f"text:{token}", self.config.text_dim)

    def image_global(self, image_key: str) -> np.ndarray:
        return self._lookup(f"img-g:{image_key}", self.config.image_dim)

    def image_patch(self, image_key: str, patch_index: int) -> np.ndarray:
        return self._lookup(f"img-p:{patch_index}:{image_key}", self.config.image_dim)


def write_embedding_file(records: Mapping[str, np.ndarray], path: str | Path) -> None:
    with open(path, "wb") as fh:
        for key in sorted(records):
            encoded = key.encode("utf-8")
            values = np.ascontiguousarray(records[key], dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", values.shape[0]))
            fh.write(values.tobytes())


def read_embedding_file(path: str | Path) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CorruptionError(f"{path}: truncated record header")
            (key_len,) = struct.unpack("<I", head)
            key = _read_exact(fh, key_len).decode("utf-8")
            (dim,) = struct.unpack("<I", _read_exact(fh, 4))
            data = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4")
            records[key] = data.astype(np.float64)
    return records


def embed_tokens(tokens: Sequence[str], provider, config: EncoderConfig) -> TextFeatures:
    if not tokens:
        raise InputError("cannot embed an empty token sequence")
    embeddings = np.stack([provider.text_vector(tok) for tok in tokens])
    return TextFeatures(tuple(tokens), embeddings)


def embed_text(text: str, provider, config: EncoderConfig) -> TextFeatures:
    """Token-level text features: lowercased whitespace tokens, one vector each."""
    tokens = tokenize(text)
    if not tokens:
        raise InputError("text is empty after tokenization")
    return embed_tokens(tokens, provider, config)


def embed_image(image_key: str, provider, config: EncoderConfig) -> ImageFeatures:
    """Global and patch-level image features for a symbolic image key."""
    global_vec = provider.image_global(image_key)
    patches = np.stack(
        [provider.image_patch(image_key, j) for j in range(config.n_patches)]
    )
    return ImageFeatures(global_vec, patches)


def apply_ete(text: TextFeatures, span: Iterable[int], theta: np.ndarray) -> TextFeatures:
    """Copy of `text` with `theta` added to the embeddings at `span` (0-based)."""
    indices = sorted(set(int(i) for i in span))
    n = text.embeddings.shape[0]
    for i in indices:
        if i < 0 or i >= n:
            raise SpanError(f"token index {i} outside range [0, {n})")
    shifted = text.embeddings.copy()
    if indices:
        shifted[indices] += np.asarray(theta, dtype=np.float64)
    return TextFeatures(text.tokens, shifted)


# ---------------------------------------------------------------------------
# Differentiable kernels (forward passes with caches).
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


def mlp_forward(x: np.ndarray, p: MlpParams) -> tuple[np.ndarray, dict]:
    """x: (n, d_in) -> (n, d_out)."""
    pre = x @ p.w1 + p.b1
    act = gelu(pre)
    out = act @ p.w2 + p.b2
    return out, {"x": x, "pre": pre, "act": act}


def rownorm_forward(x: np.ndarray) -> tuple[np.ndarray, dict]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= 1e-300):
        raise NumericError("projection produced a zero vector; cannot normalize")
    y = x / norms
    return y, {"y": y, "norms": norms}


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)  # (H, n, hd)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, hd = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * hd)


def cross_attend_forward(
    patches: np.ndarray, text_emb: np.ndarray, p: AttnParams, config: EncoderConfig
) -> tuple[np.ndarray, dict]:
    """One transformer block: patches attend to text tokens.

    Patches provide the queries, text tokens the keys and values; both the
    multi-head attention sublayer and the position-wise feed-forward carry a
    residual connection.  Output: (n_patches, attn_dim).
    """
    head_dim = config.attn_dim // config.n_heads
    scale = 1.0 / math.sqrt(head_dim)
    x = patches @ p.wq + p.bq  # (N_p, attn_dim): query projection, residual base
    k = text_emb @ p.wk + p.bk
    v = text_emb @ p.wv + p.bv
    qh = _split_heads(x, config.n_heads)
    kh = _split_heads(k, config.n_heads)
    vh = _split_heads(v, config.n_heads)
    logits = np.einsum("hqd,hkd->hqk", qh, kh) * scale
    logits -= logits.max(axis=2, keepdims=True)  # stability shift, gradient-neutral
    weights = np.exp(logits)
    weights /= weights.sum(axis=2, keepdims=True)
    heads = np.einsum("hqk,hkd->hqd", weights, vh)
    concat = _merge_heads(heads)
    attn_out = concat @ p.wo + p.bo
    h1 = x + attn_out
    ff_pre = h1 @ p.f1 + p.f1b
    ff_act = gelu(ff_pre)
    ff_out = ff_act @ p.f2 + p.f2b
    h2 = h1 + ff_out
    cache = {
        "patches": patches, "text_emb": text_emb, "x": x, "k": k, "v": v,
        "qh": qh, "kh": kh, "vh": vh, "weights": weights, "concat": concat,
        "h1": h1, "ff_pre": ff_pre, "ff_act": ff_act, "scale": scale,
    }
    return h2, cache


def cross_attend(
    patches: np.ndarray, text: TextFeatures, params: EncoderParams, config: EncoderConfig
) -> np.ndarray:
    """Public fused-feature map; validates weight finiteness first."""
    for name in _ATTN_FIELDS:
        if not np.all(np.isfinite(getattr(params.xattn, name))):
            raise NumericError(f"non-finite values in cross-attention tensor {name!r}")
    out, _ = cross_attend_forward(patches, text.embeddings, params.xattn, config)
    return out


# ---------------------------------------------------------------------------
# Feature-set assembly.
# ---------------------------------------------------------------------------


def _project_unit(rows: np.ndarray, p: MlpParams) -> tuple[np.ndarray, dict]:
    raw, mlp_cache = mlp_forward(rows, p)
    unit, norm_cache = rownorm_forward(raw)
    return unit, {"mlp": mlp_cache, "norm": norm_cache}


def _image_block_forward(
    image: ImageFeatures,
    text_emb: np.ndarray,
    params: EncoderParams,
    config: EncoderConfig,
    with_mm: bool,
) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """Per-image features: projected global vector plus optional fused tokens."""
    ghat, g_cache = _project_unit(image.global_vec[None, :], params.global_proj)
    cache: dict = {"g": g_cache, "image": image, "with_mm": with_mm}
    mhat = None
    if with_mm:
        fused, x_cache = cross_attend_forward(image.patches, text_emb, params.xattn, config)
        flat = fused.reshape(1, -1)
        mm_raw, mm_cache = mlp_forward(flat, params.mm_proj)
        tokens = mm_raw.reshape(config.n_mm_tokens, config.dim)
        mhat, mm_norm = rownorm_forward(tokens)
        cache.update({"xattn": x_cache, "mm_mlp": mm_cache, "mm_norm": mm_norm})
    return ghat[0], mhat, cache


def encode_query_forward(
    query: QueryInput,
    params: EncoderParams,
    config: EncoderConfig,
    provider,
    image_only: bool = False,
) -> tuple[FeatureSet, dict]:
    tokens = tokenize(query.text)
    if not tokens and not image_only:
        raise InputError("query text is empty; only image-only mode allows that")
    used_null = False
    if tokens:
        text = embed_tokens(tokens, provider, config)
        text_emb = text.embeddings
    else:
        # learned null-text token stands in for absent text
        used_null = True
        text_emb = params.null_text[None, :]
    image = embed_image(query.image_key, provider, config)
    ghat, mhat, img_cache = _image_block_forward(image, text_emb, params, config, with_mm=True)

    rows = [ghat[None, :]]
    provenance: list[str] = ["global-image:0"]
    text_cache = None
    if not image_only:
        that, text_cache = _project_unit(text_emb, params.text_proj)
        rows.append(that)
        provenance.extend(["textual"] * text_emb.shape[0])
    rows.append(mhat)
    provenance.extend(f"multimodal:0,{j}" for j in range(config.n_mm_tokens))
    features = FeatureSet(np.vstack(rows), tuple(provenance))
    cache = {
        "image_block": img_cache,
        "text_cache": text_cache,
        "used_null": used_null,
        "image_only": image_only,
        "n_text": text_emb.shape[0],
    }
    return features, cache


def encode_query(
    query: QueryInput,
    params: EncoderParams,
    config: EncoderConfig,
    provider,
    image_only: bool = False,
) -> FeatureSet:
    """Query feature set: projected global image, text, and fused tokens.

    Standard mode yields 1 + N_t + n_mm_tokens members; image-only mode drops
    the projected text tokens (they still drive cross-attention keys/values).
    """
    check_params_finite(params)
    features, _ = encode_query_forward(query, params, config, provider, image_only)
    return features


def encode_document_forward(
    doc: AugmentedDocument,
    params: EncoderParams,
    config: EncoderConfig,
    provider,
    flags: EncoderFlags,
) -> tuple[FeatureSet, dict]:
    if not doc.raw.main_image_key:
        raise DocumentError(f"document {doc.doc_id!r} has no main image")
    if not doc.text_tokens:
        raise InputError(f"document {doc.doc_id!r} has an empty body")
    text = embed_tokens(doc.text_tokens, provider, config)
    that, text_cache = _project_unit(text.embeddings, params.text_proj)

    images: list[tuple[str, tuple[int, ...]]] = [(doc.raw.main_image_key, ())]
    if flags.mi:
        images.extend((rel.image_key, rel.span) for rel in doc.related)

    rows = [that]
    provenance = ["textual"] * len(doc.text_tokens)
    blocks = []
    for r, (image_key, span) in enumerate(images):
        image = embed_image(image_key, provider, config)
        with_mm = (r == 0) or flags.mmf
        if flags.ete and span:
            perturbed = apply_ete(text, span, params.ete)
            text_emb_r = perturbed.embeddings
        else:
            text_emb_r = text.embeddings
        ghat, mhat, block_cache = _image_block_forward(
            image, text_emb_r, params, config, with_mm
        )
        block_cache["span"] = span if (flags.ete and span) else ()
        blocks.append(block_cache)
        rows.append(ghat[None, :])
        provenance.append(f"global-image:{r}")
        if mhat is not None:
            rows.append(mhat)
            provenance.extend(f"multimodal:{r},{j}" for j in range(config.n_mm_tokens))
    features = FeatureSet(np.vstack(rows), tuple(provenance))
    cache = {"text_cache": text_cache, "blocks": blocks, "n_text": len(doc.text_tokens)}
    return features, cache


def encode_document(
    doc: AugmentedDocument,
    params: EncoderParams,
    config: EncoderConfig,
    provider,
    flags: EncoderFlags = EncoderFlags(),
) -> FeatureSet:
    """Document feature set: text union per-image global + fused tokens.

    All flags on: |D| = N_t + (R + 1) * (1 + n_mm_tokens).  mi off drops the
    related images entirely; mmf off keeps fused tokens only for the main
    image, so each related image contributes just its projected global
    feature; ete off (or a zero embedding) leaves the text unperturbed.
    """
    check_params_finite(params)
    features, _ = encode_document_forward(doc, params, config, provider, flags)
    return features


def encode_corpus(
    kb: Mapping[str, AugmentedDocument],
    params: EncoderParams,
    config: EncoderConfig,
    provider,
    flags: EncoderFlags = EncoderFlags(),
) -> dict[str, FeatureSet]:
    check_params_finite(params)
    out: dict[str, FeatureSet] = {}
    for doc_id in sorted(kb):
        features, _ = encode_document_forward(kb[doc_id], params, config, provider, flags)
        out[doc_id] = features
    return out
