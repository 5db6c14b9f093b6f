"""Regenerates tiny-gpt2/: a random two-layer GPT-2 saved in the standard
Hugging Face layout, plus reference activations from the transformers
implementation for a fixed token sequence."""

import json
import pathlib

import torch
from transformers import GPT2Config, GPT2LMHeadModel

OUT = pathlib.Path(__file__).parent / "tiny-gpt2"
EXTRA = ["Word:", "Label:", " Paris", " France", "Sentence:", " capital"]
TOKENS = [87, 111, 114, 100, 58, 32, 256, 257, 258, 10, 261, 259, 257, 32, 1, 300, 17]
POSITIONS = [0, 5, 10, 16]

torch.manual_seed(7)
config = GPT2Config(
    vocab_size=256 + len(EXTRA) + 40,
    n_positions=64,
    n_embd=8,
    n_layer=2,
    n_head=2,
    resid_pdrop=0.0,
    embd_pdrop=0.0,
    attn_pdrop=0.0,
    bos_token_id=0,
    eos_token_id=0,
)
model = GPT2LMHeadModel._from_config(config, attn_implementation="eager").eval()
with torch.no_grad():
    for p in model.parameters():
        p.copy_(torch.randn_like(p) * 0.5)

OUT.mkdir(exist_ok=True)
model.save_pretrained(OUT, safe_serialization=True)
(OUT / "greedy_vocab.json").write_text(json.dumps({"extra": EXTRA + [f"<x{i}>" for i in range(40)]}))

blocks = {}
hooks = [
    blk.register_forward_hook(
        lambda m, i, o, li=li: blocks.__setitem__(li + 1, (o[0] if isinstance(o, tuple) else o)[0].detach())
    )
    for li, blk in enumerate(model.transformer.h)
]
with torch.no_grad():
    out = model(torch.tensor([TOKENS]), output_attentions=True)
for h in hooks:
    h.remove()

expected = {
    "tokens": TOKENS,
    "positions": POSITIONS,
    "hidden": {
        f"{layer}": {f"{p}": blocks[layer][p].tolist() for p in POSITIONS} for layer in blocks
    },
    "attention": {
        f"{li + 1}": {f"{p}": att[0].mean(0)[p].tolist() for p in POSITIONS}
        for li, att in enumerate(out.attentions)
    },
    "final_logits": out.logits[0, -1].tolist(),
}
(OUT / "expected.json").write_text(json.dumps(expected))
