"""Finite-difference oracle and small model fixtures."""
import torch

from sparql_lm.model import ModelConfig, build_seq2seq, init_weights, masked_cross_entropy


def tiny_seq2seq(L=2, H=16, A=2, V=50, seed=0, tie=True, dtype=torch.float64, std=0.02):
    enc = ModelConfig(num_layers=L, hidden=H, heads=A, vocab_size=V, max_positions=16, dropout=0.0)
    dec = ModelConfig(
        num_layers=L, hidden=H, heads=A, vocab_size=V, max_positions=16, dropout=0.0,
        is_decoder=True, tie_embeddings=tie,
    )
    model = build_seq2seq(enc, dec, seed=seed).to(dtype)
    if std != 0.02:
        init_weights(model, seed, std=std)
    model.eval()
    return model


def toy_batch(V=50, T=8, B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    src = torch.randint(5, V, (B, T), generator=g)
    tgt = torch.randint(5, V, (B, T), generator=g)
    src_mask = torch.ones(B, T, dtype=torch.long)
    tgt_mask = torch.ones(B, T, dtype=torch.long)
    src_mask[1, -2:] = 0
    tgt_mask[1, -3:] = 0
    labels = torch.randint(5, V, (B, T), generator=g)
    labels[tgt_mask == 0] = -100
    return src, src_mask, tgt, tgt_mask, labels


def fd_gradients(model, loss_fn, h=1e-5):
    """Central differences for every entry of every named parameter."""
    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn()
                flat[i] = orig - h
                down = loss_fn()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out[name] = g
    return out


def relative_errors(analytic, numeric, floor=1e-7):
    """Per-tensor ||a - n|| / max(||a||, ||n||); tensors with both norms below
    ``floor`` are compared absolutely instead."""
    errs = {}
    for name, a in analytic.items():
        n = numeric[name]
        diff = (a - n).norm().item()
        scale = max(a.norm().item(), n.norm().item())
        errs[name] = diff / scale if scale > floor else diff
    return errs


def seq2seq_loss(model, batch):
    src, src_mask, tgt, tgt_mask, labels = batch

    def loss():
        logits = model(src, src_mask, tgt, tgt_mask)
        return masked_cross_entropy(logits, labels)[0].item()

    return loss
