"""BERT-style transformer stacks and the encoder-decoder built from them.

One ``Transformer`` holds a full parameter tree: token/position/segment
embeddings, post-norm blocks, and the output head. With ``is_decoder`` the
self-attention becomes causal and every block gains a cross-attention
sublayer. With ``tie_embeddings`` the output projection *is* the token
embedding matrix.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

IGNORE = -100


class SequenceTooLong(ValueError):
    pass


class AllKeysMasked(ValueError):
    pass


class CacheMismatch(RuntimeError):
    pass


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden: int = 64
    heads: int = 2
    vocab_size: int = 1000
    max_positions: int = 512
    ffn_dim: int | None = None
    dropout: float = 0.1
    is_decoder: bool = False
    tie_embeddings: bool = True
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def as_decoder(self) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), "is_decoder": True})


BERT_BASE = ModelConfig(
    num_layers=12, hidden=768, heads=12, ffn_dim=3072, vocab_size=28_996, max_positions=512
)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count of ``Transformer(cfg)``."""
    H, F_, V, P = cfg.hidden, cfg.ffn_dim, cfg.vocab_size, cfg.max_positions
    attn = 4 * (H * H + H)
    norm = 2 * H
    ffn = H * F_ + F_ + F_ * H + H
    layer = attn + norm + ffn + norm
    if cfg.is_decoder:
        layer += attn + norm
    embeddings = V * H + P * H + 2 * H + norm
    head = V + (0 if cfg.tie_embeddings else V * H)
    return embeddings + cfg.num_layers * layer + head


def cross_attention_parameters(cfg: ModelConfig) -> tuple[int, int]:
    """(attention weights + biases, layer-norm params) added by cross-attention."""
    H = cfg.hidden
    return cfg.num_layers * 4 * (H * H + H), cfg.num_layers * 2 * H


# --------------------------------------------------------------------------
# modules


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden
        self.heads = cfg.heads
        self.head_dim = H // cfg.heads
        self.query = nn.Linear(H, H)
        self.key = nn.Linear(H, H)
        self.value = nn.Linear(H, H)
        self.output = nn.Linear(H, H)
        self.dropout = nn.Dropout(cfg.dropout)

    def _split(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, kv, key_mask, query_mask, causal=False):
        B, Tq, H = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(kv)), self._split(self.value(kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        allowed = key_mask[:, None, None, :].bool()
        if causal:
            tri = torch.ones(Tq, kv.shape[1], dtype=torch.bool, device=x.device).tril()
            allowed = allowed & tri
        scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
        probs = scores.softmax(-1) * query_mask[:, None, :, None].to(scores.dtype)
        ctx = self.dropout(probs) @ v
        ctx = ctx.transpose(1, 2).reshape(B, Tq, H)
        return self.output(ctx), probs


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H, eps = cfg.hidden, cfg.layer_norm_eps
        self.self_attn = Attention(cfg)
        self.self_norm = nn.LayerNorm(H, eps=eps)
        if cfg.is_decoder:
            self.cross_attn = Attention(cfg)
            self.cross_norm = nn.LayerNorm(H, eps=eps)
        self.ffn_in = nn.Linear(H, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, H)
        self.ffn_norm = nn.LayerNorm(H, eps=eps)
        self.dropout = nn.Dropout(cfg.dropout)
        self.is_decoder = cfg.is_decoder

    def forward(self, x, mask, enc=None, enc_mask=None, record=None):
        a, p = self.self_attn(x, x, mask, mask, causal=self.is_decoder)
        x = self.self_norm(x + self.dropout(a))
        if record is not None:
            record.append(p)
        if self.is_decoder:
            if enc is not None:
                c, p = self.cross_attn(x, enc, enc_mask, mask)
                x = x + self.dropout(c)
                if record is not None:
                    record.append(p)
            x = self.cross_norm(x)
        f = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(f))


class Transformer(nn.Module):
    """A single encoder or decoder stack with its LM head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden
        self.token_embeddings = nn.Embedding(cfg.vocab_size, H)
        self.position_embeddings = nn.Embedding(cfg.max_positions, H)
        self.segment_embeddings = nn.Embedding(2, H)
        self.embedding_norm = nn.LayerNorm(H, eps=cfg.layer_norm_eps)
        self.embedding_dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.lm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        if not cfg.tie_embeddings:
            self.lm_weight = nn.Parameter(torch.empty(cfg.vocab_size, H))
        self.attention_record: list[torch.Tensor] | None = None

    def forward(self, ids, attention_mask=None, segment_ids=None, encoder_states=None, encoder_mask=None):
        B, T = ids.shape
        if T > self.cfg.max_positions:
            raise SequenceTooLong(f"length {T} exceeds max_positions {self.cfg.max_positions}")
        if attention_mask is None:
            attention_mask = torch.ones_like(ids)
        if segment_ids is None:
            segment_ids = torch.zeros_like(ids)
        if encoder_states is not None:
            if not self.cfg.is_decoder:
                raise ValueError("encoder stack takes no encoder_states")
            if encoder_mask is None:
                encoder_mask = torch.ones(encoder_states.shape[:2], dtype=torch.long)
            if (encoder_mask.sum(-1) == 0).any():
                raise AllKeysMasked("every encoder position is masked for some row")
        pos = torch.arange(T, device=ids.device)[None, :]
        x = self.token_embeddings(ids) + self.position_embeddings(pos) + self.segment_embeddings(segment_ids)
        x = self.embedding_dropout(self.embedding_norm(x))
        record = [] if self.attention_record is not None else None
        for block in self.layers:
            x = block(x, attention_mask, encoder_states, encoder_mask, record)
        if record is not None:
            self.attention_record = record
        return x

    @property
    def output_weight(self) -> torch.Tensor:
        return self.token_embeddings.weight if self.cfg.tie_embeddings else self.lm_weight

    def logits(self, hidden):
        return hidden @ self.output_weight.T + self.lm_bias


class Seq2Seq(nn.Module):
    def __init__(self, encoder_cfg: ModelConfig, decoder_cfg: ModelConfig):
        super().__init__()
        if not decoder_cfg.is_decoder:
            raise ValueError("decoder config must set is_decoder")
        if encoder_cfg.hidden != decoder_cfg.hidden:
            raise ValueError("encoder and decoder hidden sizes differ")
        self.encoder = Transformer(encoder_cfg)
        self.decoder = Transformer(decoder_cfg)

    def encode(self, src_ids, src_mask):
        return self.encoder(src_ids, src_mask)

    def decode(self, tgt_ids, tgt_mask, enc, src_mask):
        return self.decoder.logits(self.decoder(tgt_ids, tgt_mask, None, enc, src_mask))

    def forward(self, src_ids, src_mask, tgt_ids, tgt_mask):
        return self.decode(tgt_ids, tgt_mask, self.encode(src_ids, src_mask), src_mask)


def init_weights(module: nn.Module, seed: int | None = None, std: float = 0.02) -> None:
    """Truncated normal (±2σ) matrices, zero biases, unit layer norms."""
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    for name, p in module.named_parameters():
        with torch.no_grad():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias") or p.dim() == 1:
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std, generator=gen)


def build_transformer(cfg: ModelConfig, seed: int = 0) -> Transformer:
    model = Transformer(cfg)
    init_weights(model, seed)
    return model


def build_seq2seq(encoder_cfg: ModelConfig, decoder_cfg: ModelConfig, seed: int = 0) -> Seq2Seq:
    model = Seq2Seq(encoder_cfg, decoder_cfg)
    init_weights(model, seed)
    return model


# --------------------------------------------------------------------------
# functional surface


def _as_batch(x, dtype=torch.long):
    t = torch.as_tensor(x, dtype=dtype)
    return t[None, :] if t.dim() == 1 else t


def encoder_forward(model: Transformer, seq) -> torch.Tensor:
    """Hidden states (len x H) for one TokenSequence."""
    return model(_as_batch(seq.ids), _as_batch(seq.attention_mask), _as_batch(seq.segment_ids))[0]


def decoder_forward(model: Transformer, target_seq, encoder_states, encoder_mask) -> torch.Tensor:
    if not model.cfg.is_decoder:
        raise ValueError("decoder_forward needs an is_decoder config")
    enc = encoder_states if encoder_states is None or encoder_states.dim() == 3 else encoder_states[None]
    mask = None if encoder_mask is None else _as_batch(encoder_mask)
    out = model(_as_batch(target_seq.ids), _as_batch(target_seq.attention_mask), None, enc, mask)
    return out[0]


def lm_logits(model: Transformer, hidden: torch.Tensor) -> torch.Tensor:
    return model.logits(hidden)


def masked_cross_entropy(logits: torch.Tensor, labels, ignore_index: int = IGNORE):
    """Mean negative log-likelihood over labelled rows, and its gradient wrt logits."""
    logits = logits.detach()
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    flat = logits.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    keep = lab != ignore_index
    n = int(keep.sum())
    grad = torch.zeros_like(flat)
    if n == 0:
        return torch.zeros((), dtype=logits.dtype), grad.view_as(logits)
    logp = flat[keep].log_softmax(-1)
    rows = torch.arange(n)
    loss = -logp[rows, lab[keep]].sum() / n
    g = logp.exp()
    g[rows, lab[keep]] -= 1.0
    grad[keep] = g / n
    return loss, grad.view_as(logits)


@dataclass
class ForwardCache:
    model: nn.Module
    output: torch.Tensor
    versions: dict[str, int]


def forward_with_cache(model: nn.Module, fn, *args, **kwargs) -> ForwardCache:
    """Run ``fn(*args)`` with autograd recording, remembering parameter versions."""
    versions = {n: p._version for n, p in model.named_parameters()}
    with torch.enable_grad():
        out = fn(*args, **kwargs)
    return ForwardCache(model, out, versions)


def backward(model: nn.Module, cache: ForwardCache, output_grad: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of every named parameter.

    A parameter shared between roles (tied embeddings) appears once and
    receives the sum of both contributions.
    """
    if cache.model is not model:
        raise CacheMismatch("cache was produced by a different model")
    named = dict(model.named_parameters())
    if {n: p._version for n, p in named.items()} != cache.versions:
        raise CacheMismatch("parameters changed since the forward pass")
    if cache.output.grad_fn is None:
        raise CacheMismatch("cache holds no autograd graph")
    try:
        grads = torch.autograd.grad(cache.output, list(named.values()), output_grad, allow_unused=True)
    except RuntimeError as exc:
        raise CacheMismatch(str(exc)) from exc
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named.items(), grads)}
