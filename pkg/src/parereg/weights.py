"""Weight container: a flat binary of named float32 tensors.

Layout: 8-byte magic, then per record a u32 name length, the UTF-8 name, a
u32 rank, u32 dims, and the row-major little-endian float32 payload. Record
order is fixed by the parameter tree walk, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import AppConfig
from .errors import InputError
from .matching import (
    AttentionParams,
    ContextParams,
    MatchHeads,
    RoundParams,
    build_context_params,
    build_match_heads,
)
from .pareconv import (
    BackboneConfig,
    BackboneParams,
    CorrelationNet,
    FusionParams,
    KernelBank,
    ResBlockParams,
    build_backbone_params,
)
from .vn import VnInvariantHead, VnLinear, VnNonlinearity

MAGIC = b"PAREW1\x00\x00"


# ---------------------------------------------------------------- build

def init_pipeline_params(cfg: AppConfig, seed: int, corr_final: str = "zero"):
    """All parameters for one run, deterministically derived from the seed."""
    rng = np.random.default_rng(seed)
    s_backbone, s_context, s_heads = (int(v) for v in rng.integers(0, 2**63, size=3))
    backbone = build_backbone_params(cfg.backbone, s_backbone, corr_final=corr_final)
    context = build_context_params(
        d_in=cfg.d_super,
        width=cfg.attention.width,
        d_out=cfg.attention.out_width,
        seed=s_context,
        rounds=cfg.attention.rounds,
        heads=cfg.attention.heads,
        n_buckets=cfg.attention.n_buckets,
        bucket_size=cfg.attention.bucket_size,
    )
    heads = build_match_heads(cfg.d_point, s_heads)
    return backbone, context, heads


# ---------------------------------------------------------------- flatten

def _flatten_net(prefix: str, net: CorrelationNet, out: dict) -> None:
    for i, (lin, rel) in enumerate(net.vn_pairs):
        out[f"{prefix}.vn{i}.lin"] = lin.w
        out[f"{prefix}.vn{i}.dir"] = rel.u
    for i, (w, b) in enumerate(net.mlp):
        out[f"{prefix}.mlp{i}.w"] = w
        out[f"{prefix}.mlp{i}.b"] = b


def _flatten_block(prefix: str, block: ResBlockParams, out: dict) -> None:
    out[f"{prefix}.bank"] = block.bank.weights
    _flatten_net(f"{prefix}.net", block.net, out)
    out[f"{prefix}.conv_relu"] = block.conv_relu.u
    out[f"{prefix}.expand"] = block.expand.w
    out[f"{prefix}.expand_relu"] = block.expand_relu.u
    if block.shortcut is not None:
        out[f"{prefix}.shortcut"] = block.shortcut.w


def params_to_records(backbone: BackboneParams, context: ContextParams, heads: MatchHeads) -> dict:
    out: dict = {}
    for si, stage in enumerate(backbone.stages):
        for bi, block in enumerate(stage):
            _flatten_block(f"backbone.stage{si}.block{bi}", block, out)
    for fi, fusion in enumerate(backbone.fusions):
        out[f"backbone.fusion{fi}.lin"] = fusion.lin.w
        out[f"backbone.fusion{fi}.dir"] = fusion.relu.u
    out["backbone.head_super"] = backbone.head_super.w
    out["backbone.head_point"] = backbone.head_point.w
    out["context.in_proj"] = context.in_proj
    for ri, rnd in enumerate(context.rounds):
        for kind, attn in (("self", rnd.self_attn), ("cross", rnd.cross_attn)):
            for name in ("w_q", "w_k", "w_v", "w_o"):
                out[f"context.round{ri}.{kind}.{name}"] = getattr(attn, name)
        out[f"context.round{ri}.bias"] = rnd.bias_table
    out["context.out_proj"] = context.out_proj
    out["heads.w_m"] = heads.w_m
    out["heads.w_s"] = heads.w_s
    return out


# ---------------------------------------------------------------- rebuild

def _take(records: dict, name: str) -> np.ndarray:
    if name not in records:
        raise InputError(f"missing record '{name}'")
    return np.asarray(records[name], dtype=np.float64)


def _rebuild_net(prefix: str, cfg: BackboneConfig, records: dict) -> CorrelationNet:
    pairs = []
    for i in range(len(cfg.corr_vn_channels)):
        pairs.append(
            (
                VnLinear(_take(records, f"{prefix}.vn{i}.lin")),
                VnNonlinearity(_take(records, f"{prefix}.vn{i}.dir")),
            )
        )
    mlp = []
    for i in range(len(cfg.corr_mlp_hidden) + 1):
        mlp.append((_take(records, f"{prefix}.mlp{i}.w"), _take(records, f"{prefix}.mlp{i}.b")))
    return CorrelationNet(tuple(pairs), tuple(mlp))


def _rebuild_block(
    prefix: str, cfg: BackboneConfig, records: dict, c_in: int, c_out: int, entry: bool
) -> ResBlockParams:
    return ResBlockParams(
        bank=KernelBank(_take(records, f"{prefix}.bank")),
        net=_rebuild_net(f"{prefix}.net", cfg, records),
        mode="node" if entry else cfg.mode,
        conv_relu=VnNonlinearity(_take(records, f"{prefix}.conv_relu")),
        expand=VnLinear(_take(records, f"{prefix}.expand")),
        expand_relu=VnNonlinearity(_take(records, f"{prefix}.expand_relu")),
        shortcut=VnLinear(_take(records, f"{prefix}.shortcut")) if c_in != c_out else None,
    )


def params_from_records(cfg: AppConfig, records: dict):
    """Rebuild the parameter tree, checking names and shapes field by field."""
    template = params_to_records(*init_pipeline_params(cfg, seed=0))
    for name, arr in template.items():
        got = _take(records, name)
        if got.shape != arr.shape:
            raise InputError(f"record '{name}': expected shape {arr.shape}, got {got.shape}")
    extra = sorted(set(records) - set(template))
    if extra:
        raise InputError(f"unexpected record '{extra[0]}'")

    b = cfg.backbone
    c1, c2, c3 = b.stage_channels
    plan = (
        ((3, c1, True), (c1, c1, False), (c1, c1, False)),
        ((c1, c2, False), (c2, c2, False), (c2, c2, False)),
        ((c2, c3, False), (c3, c3, False), (c3, c3, False)),
    )
    stages = tuple(
        tuple(
            _rebuild_block(f"backbone.stage{si}.block{bi}", b, records, cin, cout, entry)
            for bi, (cin, cout, entry) in enumerate(stage)
        )
        for si, stage in enumerate(plan)
    )
    fusions = tuple(
        FusionParams(
            VnLinear(_take(records, f"backbone.fusion{fi}.lin")),
            VnNonlinearity(_take(records, f"backbone.fusion{fi}.dir")),
        )
        for fi in range(2)
    )
    backbone = BackboneParams(
        config=b,
        stages=stages,
        fusions=fusions,
        head_super=VnInvariantHead(_take(records, "backbone.head_super")),
        head_point=VnInvariantHead(_take(records, "backbone.head_point")),
    )
    rounds = tuple(
        RoundParams(
            AttentionParams(
                *(_take(records, f"context.round{ri}.self.{n}") for n in ("w_q", "w_k", "w_v", "w_o"))
            ),
            AttentionParams(
                *(_take(records, f"context.round{ri}.cross.{n}") for n in ("w_q", "w_k", "w_v", "w_o"))
            ),
            _take(records, f"context.round{ri}.bias"),
        )
        for ri in range(cfg.attention.rounds)
    )
    context = ContextParams(
        in_proj=_take(records, "context.in_proj"),
        rounds=rounds,
        out_proj=_take(records, "context.out_proj"),
        heads=cfg.attention.heads,
        bucket_size=cfg.attention.bucket_size,
    )
    heads = MatchHeads(_take(records, "heads.w_m"), _take(records, "heads.w_s"))
    return backbone, context, heads


# ---------------------------------------------------------------- binary

def save_weights(records: dict, path) -> None:
    blob = bytearray(MAGIC)
    seen = set()
    for name, arr in records.items():
        if name in seen:
            raise InputError(f"duplicate record name '{name}'")
        seen.add(name)
        payload = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", payload.ndim)
        for dim in payload.shape:
            blob += struct.pack("<I", dim)
        blob += payload.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_weights(path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise InputError(f"{path}: not a weight container")
    records: dict = {}
    off = len(MAGIC)

    def need(count: int, what: str) -> int:
        if off + count > len(raw):
            raise InputError(f"{path}: truncated reading {what} at byte {off}")
        return off + count

    while off < len(raw):
        end = need(4, "name length")
        (name_len,) = struct.unpack("<I", raw[off:end])
        off = end
        end = need(name_len, "name")
        try:
            name = raw[off:end].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InputError(f"{path}: bad record name at byte {off}: {exc}") from exc
        off = end
        if name in records:
            raise InputError(f"{path}: duplicate record name '{name}'")
        end = need(4, f"rank of '{name}'")
        (rank,) = struct.unpack("<I", raw[off:end])
        off = end
        dims = []
        for i in range(rank):
            end = need(4, f"dim {i} of '{name}'")
            dims.append(struct.unpack("<I", raw[off:end])[0])
            off = end
        count = 1
        for d in dims:
            count *= d
        end = need(4 * count, f"payload of '{name}'")
        records[name] = np.frombuffer(raw[off:end], dtype="<f4").reshape(dims).copy()
        off = end
    return records
