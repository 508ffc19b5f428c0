"""Optimization, checkpoints, warm starts and the two training loops.

Parameters live in ``nn.Module`` trees but every update goes through the
functional pieces here: ``masked_cross_entropy`` gives the logit gradient,
``model.backward`` turns it into named parameter gradients, and
``adam_step`` applies them.
"""
from __future__ import annotations

import copy
import json
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Iterable, Sequence

import numpy as np
import torch

from .codec import EncodedQuery
from .corruption import IGNORE, CorruptionConfig, PretrainExample, corrupt
from .model import (
    ModelConfig,
    Seq2Seq,
    Transformer,
    backward,
    build_transformer,
    cross_attention_parameters,
    forward_with_cache,
    masked_cross_entropy,
)
from .tokenizer import Vocab, encode_sequence, tokenize


class NonFiniteGradient(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerConfig:
    learning_rate: float = 5e-5
    adam_eps: float = 1e-8
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    max_steps: int = 1000
    batch_size: int = 32
    grad_clip_norm: float | None = None
    decoupled_decay: bool = True  # False: L2 term folded into the gradient
    linear_decay: bool = False

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if not all(0.0 < b < 1.0 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ValueError("adam_betas must be two values in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("max_steps and batch_size must be >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        if not self.linear_decay:
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - (step - 1) / self.max_steps)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def global_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    cfg: OptimizerConfig,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One in-place Adam update with bias correction.

    Gradients are checked for NaN/inf before anything is touched, then
    clipped to ``grad_clip_norm`` (global norm). Decoupled weight decay
    shrinks each parameter by ``1 - lr * wd`` ahead of the moment update.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    scale = 1.0
    if cfg.grad_clip_norm is not None:
        norm = global_norm(grads)
        if norm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / norm
    b1, b2 = cfg.adam_betas
    state.step += 1
    t = state.step
    lr = cfg.lr_at(t)
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name] * scale if scale != 1.0 else grads[name]
        if cfg.weight_decay:
            if cfg.decoupled_decay:
                p.mul_(1.0 - lr * cfg.weight_decay)
            else:
                g = g + cfg.weight_decay * p
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(cfg.adam_eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return params, state


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SPARQL-LM-CKPT 1\n"


@dataclass
class Checkpoint:
    """Model tensors plus the metadata needed to rebuild and resume.

    Tensor names carry their stack prefix (``encoder.`` / ``decoder.``);
    optimizer moments are stored as ``optim.m.<name>`` / ``optim.v.<name>``.
    """

    configs: dict[str, ModelConfig]
    tensors: dict[str, torch.Tensor]
    vocab_digests: dict[str, str] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    optimizer_step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "seq2seq" if "decoder" in self.configs else "encoder"

    @classmethod
    def from_model(cls, model: Transformer | Seq2Seq, *, vocab_digests=None, step=0, seed=0,
                   optimizer: AdamState | None = None, meta=None) -> "Checkpoint":
        if isinstance(model, Seq2Seq):
            configs = {"encoder": model.encoder.cfg, "decoder": model.decoder.cfg}
            named = dict(model.named_parameters())
        else:
            configs = {"encoder": model.cfg}
            named = {f"encoder.{n}": p for n, p in model.named_parameters()}
        tensors = {n: p.detach().to(torch.float32).clone() for n, p in named.items()}
        opt_step = 0
        if optimizer is not None:
            opt_step = optimizer.step
            prefix = "" if isinstance(model, Seq2Seq) else "encoder."
            for n, m in optimizer.m.items():
                tensors[f"optim.m.{prefix}{n}"] = m.detach().to(torch.float32).clone()
                tensors[f"optim.v.{prefix}{n}"] = optimizer.v[n].detach().to(torch.float32).clone()
        return cls(dict(configs), tensors, dict(vocab_digests or {}), step, seed, opt_step, dict(meta or {}))

    def stack_tensors(self, stack: str) -> dict[str, torch.Tensor]:
        pre = stack + "."
        return {n[len(pre):]: t for n, t in self.tensors.items() if n.startswith(pre)}

    def optimizer_state(self, strip: str = "") -> AdamState:
        st = AdamState(step=self.optimizer_step)
        for n, t in self.tensors.items():
            for key, store in (("optim.m.", st.m), ("optim.v.", st.v)):
                if n.startswith(key):
                    name = n[len(key):]
                    if strip and name.startswith(strip):
                        name = name[len(strip):]
                    store[name] = t.clone()
        return st

    def build_encoder(self) -> Transformer:
        model = Transformer(self.configs["encoder"])
        load_into(model, self.stack_tensors("encoder"))
        return model

    def build_seq2seq(self) -> Seq2Seq:
        if self.kind != "seq2seq":
            raise CheckpointError("checkpoint holds an encoder only")
        model = Seq2Seq(self.configs["encoder"], self.configs["decoder"])
        load_into(model.encoder, self.stack_tensors("encoder"))
        load_into(model.decoder, self.stack_tensors("decoder"))
        return model

    # ---- serialization

    def _manifest_and_blobs(self):
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name].detach().cpu().to(torch.float32).numpy(), dtype="<f4")
            raw = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        manifest = {
            "format": 1,
            "dtype": "<f4",
            "configs": {k: v.to_dict() for k, v in sorted(self.configs.items())},
            "vocab_digests": dict(sorted(self.vocab_digests.items())),
            "step": self.step,
            "seed": self.seed,
            "optimizer_step": self.optimizer_step,
            "meta": self.meta,
            "tensors": entries,
        }
        return manifest, blobs

    def to_bytes(self) -> bytes:
        manifest, blobs = self._manifest_and_blobs()
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        return _MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    def save(self, path: str | Path) -> Path:
        """Atomic write: temp file in the same directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(_MAGIC):
            raise CheckpointError("not a checkpoint file")
        pos = len(_MAGIC)
        try:
            (n,) = struct.unpack_from("<Q", data, pos)
            manifest = json.loads(data[pos + 8 : pos + 8 + n])
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"unreadable manifest: {exc}") from exc
        body = memoryview(data)[pos + 8 + n :]
        if manifest.get("dtype") != "<f4":
            raise CheckpointError(f"unsupported dtype {manifest.get('dtype')!r}")
        if sum(e["nbytes"] for e in manifest["tensors"]) != len(body):
            raise CheckpointError("tensor bytes do not match the manifest")
        tensors, seen, expect = {}, set(), 0
        for e in manifest["tensors"]:
            name, shape = e["name"], tuple(e["shape"])
            if name in seen:
                raise CheckpointError(f"tensor {name} listed twice")
            seen.add(name)
            if e["offset"] != expect or e["nbytes"] != 4 * math.prod(shape):
                raise CheckpointError(f"bad extent for {name}")
            arr = np.frombuffer(body[e["offset"] : e["offset"] + e["nbytes"]], dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
            expect += e["nbytes"]
        configs = {k: ModelConfig.from_dict(v) for k, v in manifest["configs"].items()}
        return cls(configs, tensors, manifest["vocab_digests"], manifest["step"], manifest["seed"],
                   manifest["optimizer_step"], manifest["meta"])

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@torch.no_grad()
def load_into(model: Transformer, tensors: dict[str, torch.Tensor], strict: bool = True) -> list[str]:
    """Copy named tensors into ``model``; returns the names copied."""
    named = dict(model.named_parameters())
    if strict:
        missing, extra = set(named) - set(tensors), set(tensors) - set(named)
        if missing or extra:
            raise ShapeMismatch(f"missing {sorted(missing)[:3]} unexpected {sorted(extra)[:3]}")
    copied = []
    for name, t in tensors.items():
        if name not in named:
            continue
        p = named[name]
        if tuple(p.shape) != tuple(t.shape):
            raise ShapeMismatch(f"{name}: checkpoint {tuple(t.shape)} vs model {tuple(p.shape)}")
        p.copy_(t.to(p.dtype))
        copied.append(name)
    return copied


# --------------------------------------------------------------------------
# warm starts


def init_decoder_from_encoder_checkpoint(ckpt: Checkpoint, seed: int = 0) -> tuple[Transformer, dict]:
    """Decoder whose every non-cross-attention tensor is copied from an encoder.

    The decoder is first built exactly as a random decoder with ``seed``
    would be, so the cross-attention sublayers (and their norms) keep that
    fresh initialization.
    """
    enc_cfg = ckpt.configs["encoder"]
    dec_cfg = enc_cfg.as_decoder()
    decoder = build_transformer(dec_cfg, seed)
    source = ckpt.stack_tensors("encoder")
    names = [n for n, _ in decoder.named_parameters()]
    fresh = [n for n in names if ".cross_" in n]
    wanted = {n: source[n] for n in names if n not in fresh and n in source}
    missing = [n for n in names if n not in fresh and n not in source]
    if missing:
        raise ShapeMismatch(f"encoder checkpoint lacks {missing[:3]}")
    copied = load_into(decoder, wanted, strict=False)
    attn, norm = cross_attention_parameters(dec_cfg)
    manifest = {
        "copied": sorted(copied),
        "randomized": sorted(fresh),
        "randomized_attention_parameters": attn,
        "randomized_norm_parameters": norm,
    }
    return decoder, manifest


def random_decoder_manifest(decoder: Transformer) -> dict:
    attn, norm = cross_attention_parameters(decoder.cfg)
    return {
        "copied": [],
        "randomized": sorted(n for n, _ in decoder.named_parameters()),
        "randomized_attention_parameters": attn,
        "randomized_norm_parameters": norm,
    }


# initialization sources per fine-tuning variant: (encoder, decoder)
VARIANTS = {
    "RND2RND": ("random", "random"),
    "BERT2RND": ("bert", "random"),
    "BERT2BERT": ("bert", "bert"),
    "BERT2SPBERT": ("bert", "spbert"),
    "SPBERT2RND": ("spbert", "random"),
    "SPBERT2BERT": ("spbert", "bert"),
}


def resolve_variant(name: str, checkpoints: dict[str, Checkpoint]) -> tuple:
    """Map a variant name to ``(encoder_init, decoder_init)`` arguments."""
    enc, dec = VARIANTS[name.upper()]
    pick = lambda k: "random" if k == "random" else checkpoints[k]  # noqa: E731
    return pick(enc), pick(dec)


# --------------------------------------------------------------------------
# pre-training


@dataclass
class StepLog:
    step: int
    loss: float
    lr: float
    tokens_per_second: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "loss": self.loss, "lr": self.lr,
                           "tokens_per_second": self.tokens_per_second})


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def _stack(rows: Sequence[Sequence[int]], width: int) -> torch.Tensor:
    return torch.tensor([list(r[:width]) for r in rows], dtype=torch.long)


def pretrain_batch(corpus: Sequence, vocab: Vocab, ccfg: CorruptionConfig, max_len: int,
                   batch_size: int, seed: int, step: int, wso: bool) -> list[PretrainExample]:
    """The batch for ``step`` depends on (seed, step) only, so resumes replay it exactly."""
    rng = np.random.default_rng([seed, step])
    idx = rng.integers(0, len(corpus), size=batch_size)
    out = []
    for j, i in enumerate(idx):
        item = corpus[int(i)]
        if isinstance(item, PretrainExample):
            out.append(item)
            continue
        text = item.text if isinstance(item, EncodedQuery) else item
        seq = encode_sequence(tokenize(text, vocab), vocab, max_len)
        out.append(corrupt(seq, vocab, ccfg, np.random.default_rng([ccfg.seed, seed, step, j]), wso=wso))
    return out


def pretrain_loss_and_grads(model: Transformer, batch: list[PretrainExample]):
    width = max(sum(ex.attention_mask) for ex in batch)
    ids = _stack([ex.input_ids for ex in batch], width)
    mask = _stack([ex.attention_mask for ex in batch], width)
    mlm = _stack([ex.mlm_labels for ex in batch], width)
    wso = _stack([ex.wso_labels for ex in batch], width)
    dtype = next(model.parameters()).dtype
    cache = forward_with_cache(model, lambda: model.logits(model(ids, mask)))
    loss, grad = masked_cross_entropy(cache.output, mlm)
    if (wso != IGNORE).any():
        l2, g2 = masked_cross_entropy(cache.output, wso)
        loss, grad = loss + l2, grad + g2
    grads = backward(model, cache, grad.to(dtype))
    return float(loss), grads, int(mask.sum())


def pretrain(
    corpus: Sequence[str | EncodedQuery | PretrainExample],
    vocab: Vocab,
    model_cfg: ModelConfig,
    opt_cfg: OptimizerConfig,
    ccfg: CorruptionConfig = CorruptionConfig(),
    objectives: str = "mlm+wso",
    init: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    max_len: int = 64,
    seed: int = 0,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    metrics: IO[str] | None = None,
    on_step: Callable[[StepLog], None] | None = None,
) -> tuple[Checkpoint, list[float]]:
    """Train an encoder on MLM (optionally plus WSO) for ``opt_cfg.max_steps`` steps.

    ``init`` warm-starts the weights from another encoder checkpoint (the
    optimizer starts fresh); ``resume`` continues a previous run including
    its optimizer moments and step counter.
    """
    if objectives not in ("mlm", "mlm+wso"):
        raise ValueError(f"objectives must be 'mlm' or 'mlm+wso', got {objectives!r}")
    if not len(corpus):
        raise ValueError("empty pre-training corpus")
    if model_cfg.is_decoder:
        raise ValueError("pre-training expects an encoder config")
    wso = objectives == "mlm+wso"
    if resume is not None:
        model = resume.build_encoder()
        state = resume.optimizer_state(strip="encoder.")
        start = resume.step
        seed = resume.seed
    else:
        model = build_transformer(model_cfg, seed)
        if init is not None:
            load_into(model, init.stack_tensors("encoder"))
        state = AdamState()
        start = 0
    if model.cfg.vocab_size != len(vocab):
        raise ShapeMismatch(f"model vocab {model.cfg.vocab_size} vs tokenizer vocab {len(vocab)}")
    model.train()
    params = dict(model.named_parameters())
    meta = {"objectives": objectives, "max_len": max_len}

    def snapshot(step):
        return Checkpoint.from_model(model, vocab_digests={"encoder": vocab.digest()}, step=step,
                                     seed=seed, optimizer=state, meta=meta)

    losses = []
    for step in range(start + 1, opt_cfg.max_steps + 1):
        t0 = time.perf_counter()
        torch.manual_seed(_step_seed(seed, step))  # dropout masks
        batch = pretrain_batch(corpus, vocab, ccfg, max_len, opt_cfg.batch_size, seed, step, wso)
        loss, grads, n_tok = pretrain_loss_and_grads(model, batch)
        lr = opt_cfg.lr_at(state.step + 1)
        adam_step(params, grads, state, opt_cfg)
        losses.append(loss)
        log = StepLog(step, loss, lr, n_tok / max(time.perf_counter() - t0, 1e-9))
        if metrics is not None:
            metrics.write(log.to_json() + "\n")
        if on_step is not None:
            on_step(log)
        if out_dir is not None and checkpoint_every and step % checkpoint_every == 0:
            snapshot(step).save(Path(out_dir) / f"step{step:07d}.ckpt")
    final = snapshot(max(start, opt_cfg.max_steps))
    if out_dir is not None:
        final.save(Path(out_dir) / "final.ckpt")
    return final, losses


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class Seq2SeqBatch:
    src: torch.Tensor
    src_mask: torch.Tensor
    tgt_in: torch.Tensor
    tgt_mask: torch.Tensor
    labels: torch.Tensor


def make_seq2seq_batch(pairs: Sequence[tuple[str, str]], src_vocab: Vocab, tgt_vocab: Vocab,
                       src_max: int, tgt_max: int) -> Seq2SeqBatch:
    """Teacher forcing: decoder reads [CLS] y1..yn and predicts y1..yn [SEP]."""
    srcs = [encode_sequence(tokenize(s, src_vocab), src_vocab, src_max) for s, _ in pairs]
    tgts = [encode_sequence(tokenize(t, tgt_vocab), tgt_vocab, tgt_max + 1) for _, t in pairs]
    sw = max(s.length for s in srcs)
    tw = max(t.length for t in tgts) - 1
    src = _stack([s.ids for s in srcs], sw)
    src_mask = _stack([s.attention_mask for s in srcs], sw)
    full = _stack([t.ids for t in tgts], tw + 1)
    full_mask = _stack([t.attention_mask for t in tgts], tw + 1)
    # input position i is live iff it has a next token to predict
    live = full_mask[:, 1:]
    labels = full[:, 1:].clone()
    labels[live == 0] = IGNORE
    tgt_in = full[:, :-1].clone()
    tgt_in[live == 0] = tgt_vocab.pad_id
    return Seq2SeqBatch(src, src_mask, tgt_in, live.clone(), labels)


def seq2seq_loss_and_grads(model: Seq2Seq, b: Seq2SeqBatch):
    cache = forward_with_cache(model, model, b.src, b.src_mask, b.tgt_in, b.tgt_mask)
    loss, grad = masked_cross_entropy(cache.output, b.labels)
    grads = backward(model, cache, grad.to(cache.output.dtype))
    return float(loss), grads, cache.output.detach()


@torch.no_grad()
def teacher_forced_stats(model: Seq2Seq, batches: Iterable[Seq2SeqBatch]) -> tuple[float, float]:
    """(mean loss, token accuracy) under teacher forcing, labelled positions only."""
    was = model.training
    model.eval()
    tot_loss = correct = count = 0.0
    for b in batches:
        logits = model(b.src, b.src_mask, b.tgt_in, b.tgt_mask)
        keep = b.labels != IGNORE
        n = int(keep.sum())
        tot_loss += float(masked_cross_entropy(logits, b.labels)[0]) * n
        correct += int((logits.argmax(-1)[keep] == b.labels[keep]).sum())
        count += n
    model.train(was)
    return tot_loss / max(count, 1), correct / max(count, 1)


def _as_pair(x) -> tuple[str, str]:
    return (x.source, x.target) if hasattr(x, "source") else (x[0], x[1])


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    best_epoch: int
    best_score: float
    history: list[dict]
    decoder_manifest: dict
    model: Seq2Seq


def build_finetune_model(
    enc_cfg: ModelConfig,
    encoder_init: Checkpoint | str | None,
    decoder_init: Checkpoint | str | None,
    seed: int = 0,
    dec_cfg: ModelConfig | None = None,
) -> tuple[Seq2Seq, dict]:
    """Assemble the encoder-decoder from the chosen initialization sources.

    A checkpoint's own config wins over ``enc_cfg``/``dec_cfg`` for the
    stack it seeds; a random decoder uses ``dec_cfg`` (default: the encoder
    shape). Random stacks use ``seed`` (encoder) and ``seed + 1`` (decoder).
    """
    if isinstance(encoder_init, Checkpoint):
        encoder = encoder_init.build_encoder()
    else:
        encoder = build_transformer(enc_cfg, seed)
    if isinstance(decoder_init, Checkpoint):
        decoder, manifest = init_decoder_from_encoder_checkpoint(decoder_init, seed + 1)
    else:
        decoder = build_transformer((dec_cfg or enc_cfg).as_decoder(), seed + 1)
        manifest = random_decoder_manifest(decoder)
    if encoder.cfg.hidden != decoder.cfg.hidden:
        raise ShapeMismatch(f"encoder hidden {encoder.cfg.hidden} vs decoder hidden {decoder.cfg.hidden}")
    model = Seq2Seq(encoder.cfg, decoder.cfg)
    model.encoder, model.decoder = encoder, decoder
    return model, manifest


def finetune_seq2seq(
    pairs: Sequence,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    enc_cfg: ModelConfig,
    opt_cfg: OptimizerConfig,
    encoder_init: Checkpoint | str | None = "random",
    decoder_init: Checkpoint | str | None = "random",
    valid: Sequence | None = None,
    epochs: int = 150,
    src_max: int = 64,
    tgt_max: int = 128,
    seed: int = 0,
    select: Callable[[Seq2Seq], float] | None = None,
    eval_every: int = 1,
    stop_at: float | None = None,
    metrics: IO[str] | None = None,
    variant: str | None = None,
    dec_cfg: ModelConfig | None = None,
) -> FinetuneResult:
    """Teacher-forced training with best-on-validation model selection.

    ``select(model)`` scores the current weights (higher is better); by
    default it is the negative teacher-forced loss on ``valid`` (or on the
    training pairs when no validation set is given). ``stop_at`` ends
    training early once that score is reached.
    """
    pairs = [_as_pair(p) for p in pairs]
    if not pairs:
        raise ValueError("no training pairs")
    model, manifest = build_finetune_model(enc_cfg, encoder_init, decoder_init, seed, dec_cfg)
    if model.encoder.cfg.vocab_size != len(src_vocab) or model.decoder.cfg.vocab_size != len(tgt_vocab):
        raise ShapeMismatch("model vocab sizes do not match the tokenizers")
    dev = [_as_pair(p) for p in valid] if valid else pairs
    dev_batches = [make_seq2seq_batch(dev[i : i + 64], src_vocab, tgt_vocab, src_max, tgt_max)
                   for i in range(0, len(dev), 64)]
    if select is None:
        select = lambda m: -teacher_forced_stats(m, dev_batches)[0]  # noqa: E731
    model.train()
    params = dict(model.named_parameters())
    state = AdamState()
    best_score, best_epoch, best_state = -math.inf, 0, None
    history = []
    bs = opt_cfg.batch_size
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        ep_loss = []
        for k in range(0, len(pairs), bs):
            torch.manual_seed(_step_seed(seed, state.step + 1))
            b = make_seq2seq_batch([pairs[i] for i in order[k : k + bs]], src_vocab, tgt_vocab, src_max, tgt_max)
            loss, grads, _ = seq2seq_loss_and_grads(model, b)
            adam_step(params, grads, state, opt_cfg)
            ep_loss.append(loss)
        row = {"epoch": epoch, "step": state.step, "loss": float(np.mean(ep_loss))}
        if epoch % eval_every == 0 or epoch == epochs:
            score = select(model)
            row["score"] = score
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
        history.append(row)
        if metrics is not None:
            metrics.write(json.dumps(row) + "\n")
        if stop_at is not None and best_score >= stop_at:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint.from_model(
        model,
        vocab_digests={"encoder": src_vocab.digest(), "decoder": tgt_vocab.digest()},
        step=state.step,
        seed=seed,
        meta={"variant": variant, "best_epoch": best_epoch, "src_max": src_max, "tgt_max": tgt_max},
    )
    return FinetuneResult(ckpt, best_epoch, best_score, history, manifest, model)
