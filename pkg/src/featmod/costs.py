"""Closed-form FLOPs and memory accounting for the three injection paradigms.

Conventions, chosen so the golden numbers are stable and reproducible:

* one multiply-accumulate = 2 FLOPs; softmax, activations, additions and
  normalizations are ignored (sub-percent at any realistic scale)
* prefill only; a per-token decode figure is reported separately, assuming
  the full prefill context is attended and nothing visual is cached
* vision-encoder FLOPs are excluded everywhere: identical across paradigms,
  so only the injection cost differs
* weight bytes cover the transformer stack and injection extras; vocabulary
  embeddings are out of scope (the executable model has no tokenizer)
* peak activation is the largest single intermediate of a naive batch-1
  forward pass, which for long sequences is the (heads, S, S) attention
  score tensor

Every analytic total is validated against an op-walk oracle: the executable
model runs under the MAC counter and must agree within 1 percent
(``measured_flops``).

Per-block costs at sequence length S: QKV and output projections 8*S*C^2,
attention scores and mixing 4*S^2*C, and the FFN 4*S*C*d_ff.

Per-modulated-layer conditioner costs (L = V_total + 1 where it appears,
delta projection 8*T*C^2 included):

* attn: 4*T*C^2 (query + output) + 4*V*C^2 (keys + values) + 4*T*V*C (scores
  + mixing) + 8*T*C^2
* mlp: 4*T*C*L^2*token_exp (token mixing) + 4*T*L*C^2*channel_exp (channel
  mixing) + 8*T*C^2
* conv: 2*T*C*L*K (depthwise) + 2*T*L*C^2 (pointwise) + 8*T*C^2

The inserted cross-attention module of the architectural baseline is priced
as its executable counterpart: a full cross-attention (4*T*C^2 + 4*V*C^2 +
4*T*V*C) plus its FFN (4*T*C*d_ff) per selected layer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

from .conditioning import VisualContext, default_heads
from .model import ModelConfig, forward, init_model, round_half_up
from .tensors import ConfigError, count_macs, make_rng

BREAKDOWN_KEYS = (
    "self_attention",
    "ffn",
    "projections",
    "conditioner",
    "connector",
    "inserted_crossattn",
)


@dataclass
class CostConfig:
    L: int
    C: int
    h: int
    d_ff: int
    T: int
    V: int                      # visual tokens per image / per pooled frame
    k: int = 1                  # frames; 1 for still images
    paradigm: str = "fmi"
    cond_kind: str = "attn"
    frequency: float = 0.25
    bytes_per_elem: int = 2
    cond_token_exp: int = 4
    cond_channel_exp: int = 4
    cond_kernel: int = 3

    def validate(self) -> None:
        for name in ("L", "C", "h", "d_ff", "T", "V", "k", "bytes_per_elem"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.frequency <= 1.0:
            raise ConfigError(f"frequency {self.frequency} outside (0, 1]")
        if self.paradigm not in ("fmi", "incontext", "crossattn", "base"):
            raise ConfigError(f"unknown paradigm {self.paradigm!r}")
        if self.cond_kind not in ("mlp", "conv", "attn"):
            raise ConfigError(f"unknown conditioner kind {self.cond_kind!r}")

    @property
    def v_total(self) -> int:
        return self.k * self.V

    @property
    def seq_len(self) -> int:
        return self.v_total + self.T if self.paradigm == "incontext" else self.T

    @property
    def n_injected(self) -> int:
        if self.paradigm in ("fmi", "crossattn"):
            return round_half_up(self.frequency * self.L)
        return 0


@dataclass
class CostReport:
    paradigm: str
    cond_kind: str
    k: int
    T: int
    V: int
    v_total: int
    seq_len: int
    breakdown: dict[str, int] = field(default_factory=dict)
    total_flops: int = 0
    decode_flops_per_token: int = 0
    kv_cache_bytes: int = 0
    peak_activation_bytes: int = 0
    weight_bytes: int = 0

    @property
    def memory_total_bytes(self) -> int:
        return self.kv_cache_bytes + self.peak_activation_bytes + self.weight_bytes


def _block_split(s: int, c: int, d_ff: int) -> tuple[int, int, int]:
    """(projections, self_attention, ffn) FLOPs of one block at length s."""
    return 8 * s * c * c, 4 * s * s * c, 4 * s * c * d_ff


def flops_block(seq_len: int, c: int, h: int, d_ff: int) -> int:
    """Prefill FLOPs of one block; h is part of the signature but cancels."""
    proj, attn, ffn = _block_split(seq_len, c, d_ff)
    return proj + attn + ffn


def flops_cond(
    cond_kind: str,
    t: int,
    v: int,
    c: int,
    token_exp: int = 4,
    channel_exp: int = 4,
    kernel: int = 3,
) -> int:
    """FLOPs of one conditioner application plus its delta projection."""
    if v < 1:
        raise ConfigError(f"conditioner needs at least one visual token, got {v}")
    if t < 1:
        raise ConfigError(f"conditioner needs at least one text token, got {t}")
    projection = 8 * t * c * c
    if cond_kind == "attn":
        return 4 * t * c * c + 4 * v * c * c + 4 * t * v * c + projection
    seq = v + 1
    if cond_kind == "mlp":
        return 4 * t * c * seq * seq * token_exp + 4 * t * seq * c * c * channel_exp + projection
    if cond_kind == "conv":
        return 2 * t * c * seq * kernel + 2 * t * seq * c * c + projection
    raise ConfigError(f"unknown conditioner kind {cond_kind!r}")


def _flops_insert(t: int, v: int, c: int, d_ff: int) -> int:
    return 4 * t * c * c + 4 * v * c * c + 4 * t * v * c + 4 * t * c * d_ff


def _weight_params(cfg: CostConfig) -> int:
    c, d_ff = cfg.C, cfg.d_ff
    per_block = 4 * c * c + 2 * c * d_ff + d_ff + 5 * c  # attn, ffn + biases, two LN pairs
    total = cfg.L * per_block
    if cfg.paradigm == "fmi":
        if cfg.cond_kind == "attn":
            cond = 4 * c * c
        elif cfg.cond_kind == "conv":
            cond = c * cfg.cond_kernel + c * c
        else:
            seq = cfg.v_total + 1
            cond = (
                2 * seq * seq * cfg.cond_token_exp + seq * cfg.cond_token_exp + seq
                + 2 * c * c * cfg.cond_channel_exp + c * cfg.cond_channel_exp + c
            )
        total += cfg.n_injected * (cond + 4 * c * c + 4 * c)  # conditioner + delta projection
    elif cfg.paradigm == "incontext":
        total += c * c + c
    elif cfg.paradigm == "crossattn":
        total += cfg.n_injected * (4 * c * c + 2 * c * d_ff + d_ff + c)
    return total


def _peak_activation_elems(cfg: CostConfig) -> int:
    s, c, d_ff = cfg.seq_len, cfg.C, cfg.d_ff
    vt, t = cfg.v_total, cfg.T
    candidates = [s * c, cfg.h * s * s, s * d_ff]
    if cfg.paradigm == "fmi":
        candidates.append(t * 4 * c)
        if cfg.cond_kind == "attn":
            candidates += [default_heads(c) * t * vt, vt * c]
        elif cfg.cond_kind == "mlp":
            seq = vt + 1
            candidates += [t * c * seq * cfg.cond_token_exp, t * seq * c * cfg.cond_channel_exp]
        else:
            candidates.append(t * c * (vt + 1))
    elif cfg.paradigm == "incontext":
        candidates.append(vt * c)
    elif cfg.paradigm == "crossattn":
        candidates += [default_heads(c) * t * vt, vt * c, t * d_ff]
    return max(candidates)


def cost_paradigm(cfg: CostConfig) -> CostReport:
    """Full prefill cost report for one paradigm/config pair."""
    cfg.validate()
    s = cfg.seq_len
    proj, attn, ffn = _block_split(s, cfg.C, cfg.d_ff)
    breakdown = {key: 0 for key in BREAKDOWN_KEYS}
    breakdown["projections"] = cfg.L * proj
    breakdown["self_attention"] = cfg.L * attn
    breakdown["ffn"] = cfg.L * ffn
    if cfg.paradigm == "fmi":
        breakdown["conditioner"] = cfg.n_injected * flops_cond(
            cfg.cond_kind, cfg.T, cfg.v_total, cfg.C,
            cfg.cond_token_exp, cfg.cond_channel_exp, cfg.cond_kernel,
        )
    elif cfg.paradigm == "incontext":
        breakdown["connector"] = 2 * cfg.v_total * cfg.C * cfg.C
    elif cfg.paradigm == "crossattn":
        breakdown["inserted_crossattn"] = cfg.n_injected * _flops_insert(
            cfg.T, cfg.v_total, cfg.C, cfg.d_ff
        )

    decode = cfg.L * (8 * cfg.C * cfg.C + 4 * s * cfg.C + 4 * cfg.C * cfg.d_ff)
    if cfg.paradigm == "fmi":
        decode += cfg.n_injected * flops_cond(
            cfg.cond_kind, 1, cfg.v_total, cfg.C,
            cfg.cond_token_exp, cfg.cond_channel_exp, cfg.cond_kernel,
        )
    elif cfg.paradigm == "crossattn":
        decode += cfg.n_injected * _flops_insert(1, cfg.v_total, cfg.C, cfg.d_ff)

    return CostReport(
        paradigm=cfg.paradigm,
        cond_kind=cfg.cond_kind,
        k=cfg.k,
        T=cfg.T,
        V=cfg.V,
        v_total=cfg.v_total,
        seq_len=s,
        breakdown=breakdown,
        total_flops=sum(breakdown.values()),
        decode_flops_per_token=decode,
        kv_cache_bytes=2 * cfg.L * s * cfg.C * cfg.bytes_per_elem,
        peak_activation_bytes=_peak_activation_elems(cfg) * cfg.bytes_per_elem,
        weight_bytes=_weight_params(cfg) * cfg.bytes_per_elem,
    )


def memory_estimate(cfg: CostConfig) -> int:
    """KV cache + weights + coarse peak activation, in bytes."""
    return cost_paradigm(cfg).memory_total_bytes


def sweep_frames(cfg: CostConfig, frame_counts: list[int]) -> list[CostReport]:
    """One report per frame count, ascending; V stays the per-frame count."""
    if not frame_counts:
        raise ConfigError("frame_counts must be non-empty")
    if any(b <= a for a, b in zip(frame_counts, frame_counts[1:])):
        raise ConfigError("frame_counts must be strictly ascending")
    return [cost_paradigm(replace(cfg, k=k)) for k in frame_counts]


# ---------------------------------------------------------------------------
# Op-walk oracle

def measured_flops(cfg: CostConfig, seed: int = 0) -> int:
    """FLOPs actually performed by the executable model on this config.

    Traverses a real forward pass under the MAC counter; only viable for
    desk-scale configs.
    """
    cfg.validate()
    model_cfg = ModelConfig(
        L=cfg.L,
        C=cfg.C,
        h=cfg.h,
        d_ff=cfg.d_ff,
        paradigm=cfg.paradigm,
        cond_kind=cfg.cond_kind,
        frequency=cfg.frequency,
        cond_token_exp=cfg.cond_token_exp,
        cond_channel_exp=cfg.cond_channel_exp,
        cond_kernel=cfg.cond_kernel,
        cond_visual_tokens=cfg.v_total if cfg.cond_kind == "mlp" else None,
        seed=seed,
    )
    model = init_model(model_cfg)
    rng = make_rng(seed + 1)
    t_emb = rng.normal(size=(cfg.T, cfg.C))
    visual = None
    if cfg.paradigm != "base":
        visual = VisualContext(rng.normal(size=(cfg.v_total, cfg.C)), source_tag="synthetic")
    with count_macs() as counter:
        forward(model, t_emb, visual)
    return counter.flops


# ---------------------------------------------------------------------------
# Reference configurations and target-ratio checks

@dataclass(frozen=True)
class FlopsRatioCase:
    """One modulation-vs-prefix FLOPs comparison at a reference scale, with
    the token-count assumptions this cost model adopts for it.

    target_ratio is the reduction factor the comparison is expected to land
    near; the token counts are free parameters of the comparison, fixed here
    to the standard encoder geometries (576 tokens per 336px image, 729 per
    384px image, 5 tiles in the high-resolution modes) and to short VQA-style
    prompts for the 336px pairs versus longer instruction-style prompts for
    the 384px pair.
    """

    name: str
    L: int
    C: int
    h: int
    d_ff: int
    v_total: int
    text_tokens: int
    target_ratio: float


FLOPS_RATIO_CASES = (
    FlopsRatioCase("vicuna7b-336px-single", 32, 4096, 32, 11008, 576, 16, 14.0),
    FlopsRatioCase("vicuna7b-336px-5tile", 32, 4096, 32, 11008, 5 * 576, 16, 19.4),
    FlopsRatioCase("qwen2-7b-384px-5tile", 28, 3584, 28, 18944, 5 * 729, 128, 16.8),
)

# Video sweep reference: Qwen2-7B-scale stack, 384px frames pooled 27x27 -> 14x14.
VIDEO_SWEEP_BASE = CostConfig(
    L=28, C=3584, h=28, d_ff=18944, T=128, V=196, k=1, frequency=0.25, bytes_per_elem=2
)


def ratio_case_configs(case: FlopsRatioCase) -> tuple[CostConfig, CostConfig]:
    common = dict(
        L=case.L, C=case.C, h=case.h, d_ff=case.d_ff,
        T=case.text_tokens, V=case.v_total, k=1, frequency=0.25,
    )
    return (
        CostConfig(paradigm="fmi", cond_kind="attn", **common),
        CostConfig(paradigm="incontext", **common),
    )


def flops_reduction_ratio(case: FlopsRatioCase) -> float:
    """Prefill FLOPs of the in-context baseline over the modulated stack."""
    fmi_cfg, ctx_cfg = ratio_case_configs(case)
    return cost_paradigm(ctx_cfg).total_flops / cost_paradigm(fmi_cfg).total_flops


# ---------------------------------------------------------------------------
# CSV export

CSV_COLUMNS = (
    "paradigm", "cond_kind", "k", "T", "V", "v_total", "seq_len",
    "flops_projections", "flops_self_attention", "flops_ffn",
    "flops_conditioner", "flops_connector", "flops_inserted_crossattn",
    "flops_total", "decode_flops_per_token",
    "kv_cache_bytes", "peak_activation_bytes", "weight_bytes", "memory_total_bytes",
)


def report_row(report: CostReport) -> dict[str, str]:
    return {
        "paradigm": report.paradigm,
        "cond_kind": report.cond_kind,
        "k": str(report.k),
        "T": str(report.T),
        "V": str(report.V),
        "v_total": str(report.v_total),
        "seq_len": str(report.seq_len),
        "flops_projections": str(report.breakdown["projections"]),
        "flops_self_attention": str(report.breakdown["self_attention"]),
        "flops_ffn": str(report.breakdown["ffn"]),
        "flops_conditioner": str(report.breakdown["conditioner"]),
        "flops_connector": str(report.breakdown["connector"]),
        "flops_inserted_crossattn": str(report.breakdown["inserted_crossattn"]),
        "flops_total": str(report.total_flops),
        "decode_flops_per_token": str(report.decode_flops_per_token),
        "kv_cache_bytes": str(report.kv_cache_bytes),
        "peak_activation_bytes": str(report.peak_activation_bytes),
        "weight_bytes": str(report.weight_bytes),
        "memory_total_bytes": str(report.memory_total_bytes),
    }


def write_cost_csv(path: str | Path, reports: list[CostReport]) -> None:
    """Schema-stable export: fixed header, caller-supplied row order."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            writer.writerow(report_row(report))
