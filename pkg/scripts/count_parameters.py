"""Parameter budget of the BERT-base encoder and its warm-started decoder.

Counts are taken on the meta device, so no weights are allocated.
"""
import torch

from sparql_lm.model import BERT_BASE, Transformer

with torch.device("meta"):
    enc = Transformer(BERT_BASE)
    dec = Transformer(BERT_BASE.as_decoder())

n_enc = sum(p.numel() for p in enc.parameters())
n_dec = sum(p.numel() for p in dec.parameters())
cross = {n: p.numel() for n, p in dec.named_parameters() if ".cross_" in n}
attn = sum(v for n, v in cross.items() if ".cross_attn." in n)
print(f"encoder              {n_enc:>12,}")
print(f"decoder              {n_dec:>12,}")
print(f"  cross-attention    {attn:>12,}")
print(f"  cross layer norms  {sum(cross.values()) - attn:>12,}")
print(f"  copied from encoder{n_dec - sum(cross.values()):>12,}")
