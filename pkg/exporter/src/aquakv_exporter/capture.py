"""Hook-based KV capture from causal transformer checkpoints.

Keys and values are taken from each decoder layer's ``k_proj``/``v_proj``
outputs, i.e. before rotary rotation, which is the default capture mode.
``post_rope`` mode re-applies the model's own rotary embedding to the
captured keys. Models that do not expose separable projection modules fall
back to reading the (already rotated) entries out of the forward pass's KV
cache, recording the post-rotary mode in the trace metadata with a warning.

Attention-score accumulation follows the heavy-hitter recipe: the full
causal prefill attention matrix, summed over heads and query positions,
computed in query chunks so memory stays O(chunk * tokens * heads).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

logger = logging.getLogger(__name__)


@dataclass
class ExportConfig:
    model: str
    texts: str
    seq_len: int = 8192
    n_sequences: int = 256
    rope_mode: str = "pre_rope"
    with_stats: bool = False
    out: str = "trace.kvt"
    attention_chunk: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.rope_mode not in ("pre_rope", "post_rope"):
            raise ValueError(f"rope_mode must be pre_rope or post_rope, got {self.rope_mode!r}")
        if self.seq_len < 1 or self.n_sequences < 1:
            raise ValueError("seq_len and n_sequences must be positive")


@dataclass
class ModelGeometry:
    n_layers: int
    n_kv_heads: int
    n_heads: int
    head_dim: int

    @property
    def kv_channels(self) -> int:
        return self.n_kv_heads * self.head_dim


def read_geometry(model) -> ModelGeometry:
    cfg = model.config
    n_heads = cfg.num_attention_heads
    head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // n_heads
    return ModelGeometry(
        n_layers=cfg.num_hidden_layers,
        n_kv_heads=getattr(cfg, "num_key_value_heads", None) or n_heads,
        n_heads=n_heads,
        head_dim=head_dim,
    )


def _decoder_layers(model):
    base = getattr(model, "model", model)
    layers = getattr(base, "layers", None)
    if layers is None and hasattr(base, "decoder"):
        layers = getattr(base.decoder, "layers", None)
    return base, layers


def _find_projections(layers):
    """Per-layer (k_proj, v_proj) modules, or None if not separable."""
    found = []
    for layer in layers:
        attn = getattr(layer, "self_attn", None) or getattr(layer, "attn", None)
        k = getattr(attn, "k_proj", None) if attn is not None else None
        v = getattr(attn, "v_proj", None) if attn is not None else None
        if k is None or v is None:
            return None
        found.append((k, v))
    return found


def tokenize_and_pack(tokenizer, texts_path, seq_len: int, n_sequences: int) -> torch.Tensor:
    """Deterministic packing: tokenize documents in file order, join with
    EOS, cut contiguous windows of seq_len. Returns [n_sequences, seq_len]."""
    with open(texts_path, "r", encoding="utf-8") as f:
        docs = [line.rstrip("\n") for line in f if line.strip()]
    if not docs:
        raise ValueError(f"no documents in {texts_path}")
    eos = tokenizer.eos_token_id
    stream: list[int] = []
    for doc in docs:
        stream.extend(tokenizer.encode(doc, add_special_tokens=False))
        if eos is not None:
            stream.append(eos)
    needed = seq_len * n_sequences
    if len(stream) < needed:
        raise ValueError(
            f"texts provide {len(stream)} tokens, need {needed} "
            f"({n_sequences} sequences of {seq_len})"
        )
    ids = torch.tensor(stream[:needed], dtype=torch.long)
    return ids.view(n_sequences, seq_len)


class SequenceCapture:
    """Per-layer pre-rotary K/V (and optional attention stats) for one prefill."""

    def __init__(self, model, geometry: ModelGeometry, want_stats: bool):
        self.geometry = geometry
        self.want_stats = want_stats
        base, layers = _decoder_layers(model)
        self.base = base
        self.projections = _find_projections(layers) if layers is not None else None
        self.q_projections = None
        if self.projections is not None and want_stats:
            self.q_projections = [
                getattr(layer.self_attn, "q_proj", None) for layer in layers
            ]
            if any(p is None for p in self.q_projections):
                raise RuntimeError("attention stats need separable q projections")

    def run(self, model, input_ids: torch.Tensor):
        """Returns (keys, values, rope_mode, stats) for one [1, T] sequence."""
        t = input_ids.shape[1]
        keys: list[torch.Tensor] = []
        values: list[torch.Tensor] = []
        queries: list[torch.Tensor] = []
        handles = []

        if self.projections is None:
            return self._run_via_cache(model, input_ids)

        def grab(store):
            def hook(_module, _inputs, output):
                store.append(output.detach().to(torch.float32)[0])
            return hook

        for k_proj, v_proj in self.projections:
            handles.append(k_proj.register_forward_hook(grab(keys)))
            handles.append(v_proj.register_forward_hook(grab(values)))
        if self.q_projections is not None:
            for q_proj in self.q_projections:
                handles.append(q_proj.register_forward_hook(grab(queries)))
        try:
            with torch.no_grad():
                model(input_ids=input_ids, use_cache=False)
        finally:
            for h in handles:
                h.remove()
        if len(keys) != self.geometry.n_layers:
            raise RuntimeError(
                f"captured {len(keys)} key tensors for {self.geometry.n_layers} layers"
            )
        stats = None
        if self.want_stats:
            stats = self._accumulate_attention(model, queries, keys, t)
        return keys, values, "pre_rope", stats

    def _run_via_cache(self, model, input_ids):
        logger.warning(
            "model lacks separable k/v projections; capturing post-rotary "
            "entries from the forward cache"
        )
        with torch.no_grad():
            out = model(input_ids=input_ids, use_cache=True)
        cache = out.past_key_values
        keys, values = [], []
        for i in range(self.geometry.n_layers):
            layer = cache.layers[i]
            k, v = layer.keys, layer.values
            # [1, kv_heads, T, head_dim] -> [T, kv_heads * head_dim]
            keys.append(k[0].permute(1, 0, 2).reshape(k.shape[2], -1).to(torch.float32))
            values.append(v[0].permute(1, 0, 2).reshape(v.shape[2], -1).to(torch.float32))
        if self.want_stats:
            raise RuntimeError("attention stats are unavailable in cache-capture mode")
        return keys, values, "post_rope", None

    def rotary_tables(self, model, t: int):
        rotary = getattr(self.base, "rotary_emb", None)
        if rotary is None:
            return None
        positions = torch.arange(t, dtype=torch.long)[None]
        probe = torch.zeros(1, t, self.geometry.head_dim, dtype=torch.float32)
        cos, sin = rotary(probe, positions)
        return cos[0].to(torch.float32), sin[0].to(torch.float32)

    @staticmethod
    def rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        """The half-split rotary convention used by the model family:
        x shape [T, heads, head_dim]."""
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        rotated = torch.cat((-x2, x1), dim=-1)
        return x * cos[:, None, :] + rotated * sin[:, None, :]

    def _accumulate_attention(self, model, queries, keys, t: int) -> np.ndarray:
        """Causal softmax attention, summed over heads and query positions,
        in query chunks. Mirrors the heavy-hitter accumulation."""
        geo = self.geometry
        tables = self.rotary_tables(model, t)
        if tables is None:
            raise RuntimeError("attention stats need a discoverable rotary module")
        cos, sin = tables
        n_rep = geo.n_heads // geo.n_kv_heads
        scale = geo.head_dim**-0.5
        chunk = 256
        acc = np.zeros((geo.n_layers, t), dtype=np.float64)
        for layer in range(geo.n_layers):
            q = queries[layer].view(t, geo.n_heads, geo.head_dim)
            k = keys[layer].view(t, geo.n_kv_heads, geo.head_dim)
            q = self.rotate(q, cos, sin)
            k = self.rotate(k, cos, sin)
            k = k.repeat_interleave(n_rep, dim=1)  # [T, n_heads, head_dim]
            kt = k.permute(1, 2, 0)  # [heads, head_dim, T]
            for start in range(0, t, chunk):
                stop = min(start + chunk, t)
                qc = q[start:stop].permute(1, 0, 2)  # [heads, c, head_dim]
                scores = torch.matmul(qc, kt) * scale  # [heads, c, T]
                cols = torch.arange(t)[None, None, :]
                rows = torch.arange(start, stop)[None, :, None]
                scores = scores.masked_fill(cols > rows, float("-inf"))
                probs = torch.softmax(scores, dim=-1)
                acc[layer] += probs.sum(dim=(0, 1)).numpy()
        return acc.astype(np.float32)


def export_trace(cfg: ExportConfig) -> str:
    """Capture a trace per ``cfg`` and write it to ``cfg.out``."""
    import transformers

    torch.manual_seed(cfg.seed)
    tokenizer = transformers.AutoTokenizer.from_pretrained(cfg.model)
    model = transformers.AutoModelForCausalLM.from_pretrained(
        cfg.model, attn_implementation="eager", dtype=torch.float32
    )
    model.eval()
    geometry = read_geometry(model)

    if cfg.seq_len > getattr(model.config, "max_position_embeddings", cfg.seq_len):
        raise ValueError(
            f"seq_len {cfg.seq_len} exceeds the model's maximum context "
            f"{model.config.max_position_embeddings}"
        )

    batches = tokenize_and_pack(tokenizer, cfg.texts, cfg.seq_len, cfg.n_sequences)
    capture = SequenceCapture(model, geometry, cfg.with_stats)

    all_keys = [[] for _ in range(geometry.n_layers)]
    all_values = [[] for _ in range(geometry.n_layers)]
    all_stats = [] if cfg.with_stats else None
    rope_mode = cfg.rope_mode
    warning = ""

    for s in range(cfg.n_sequences):
        keys, values, captured_mode, stats = capture.run(model, batches[s : s + 1])
        if captured_mode == "post_rope" and cfg.rope_mode == "pre_rope":
            rope_mode = "post_rope"
            warning = "pre_rope requested but rotary is not separable; captured post_rope"
        elif cfg.rope_mode == "post_rope" and captured_mode == "pre_rope":
            tables = capture.rotary_tables(model, cfg.seq_len)
            if tables is None:
                raise RuntimeError("post_rope capture needs a discoverable rotary module")
            cos, sin = tables
            keys = [
                capture.rotate(k.view(cfg.seq_len, geometry.n_kv_heads, geometry.head_dim), cos, sin)
                .reshape(cfg.seq_len, -1)
                for k in keys
            ]
        for layer in range(geometry.n_layers):
            all_keys[layer].append(keys[layer].numpy())
            all_values[layer].append(values[layer].numpy())
        if cfg.with_stats:
            all_stats.append(stats)

    source = (
        f"export(model={cfg.model}, packing=concat-eos-chunk, seed={cfg.seed}"
        + (f", warning={warning}" if warning else "")
        + ")"
    )
    from .kvt_writer import KVTWriter

    writer = KVTWriter(
        cfg.out,
        n_layers=geometry.n_layers,
        n_kv_heads=geometry.n_kv_heads,
        head_dim=geometry.head_dim,
        sequence_lengths=[cfg.seq_len] * cfg.n_sequences,
        rope_mode=rope_mode,
        rope_theta=float(getattr(model.config, "rope_theta", 10000.0)),
        with_stats=cfg.with_stats,
        source=source,
    )
    writer.write(
        [np.vstack(all_keys[i]) for i in range(geometry.n_layers)],
        [np.vstack(all_values[i]) for i in range(geometry.n_layers)],
        np.concatenate(all_stats, axis=1) if all_stats is not None else None,
    )
    if warning:
        logger.warning(warning)
    return cfg.out
