"""Regenerate the frozen reference fixtures under tests/fixtures/.

Uses torch + transformers (GPT2Model built from a config, no downloads) as
an independent transformer implementation. Run once and commit the outputs;
tests consume the frozen files only.

    python scripts/gen_reference_fixtures.py
"""

from pathlib import Path

import numpy as np
import torch
from transformers import GPT2Config, GPT2Model

from ctxprobe.fixture import make_fixture_checkpoint, make_fixture_vocab
from ctxprobe.tokenizer import encode
from ctxprobe.windows import build_windowed_input

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

CKPT_SEED = 1
PINNED_IDS = [5, 17, 100, 42, 9, 260, 300, 12]
PINNED_MASK = [1, 1, 0, 1, 1, 0, 1, 1]
PINNED_TEXT = "The lamb ate the flower. A star rose well. The king dreamed."
EMB_N = 4
EMB_LAYER = 1


def to_hf(ckpt):
    cfg = GPT2Config(
        vocab_size=ckpt.config.vocab_size,
        n_positions=ckpt.config.max_positions,
        n_embd=ckpt.config.d_model,
        n_layer=ckpt.config.n_layers,
        n_head=ckpt.config.n_heads,
        activation_function="gelu_new",
        layer_norm_epsilon=ckpt.config.layernorm_epsilon,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        attn_implementation="eager",
    )
    model = GPT2Model(cfg)
    sd = {
        "wte.weight": ckpt.tensors["token_embedding"],
        "wpe.weight": ckpt.tensors["position_embedding"],
        "ln_f.weight": ckpt.tensors["lnf_gamma"],
        "ln_f.bias": ckpt.tensors["lnf_beta"],
    }
    for i in range(ckpt.config.n_layers):
        sd[f"h.{i}.ln_1.weight"] = ckpt.layer(i, "ln1_gamma")
        sd[f"h.{i}.ln_1.bias"] = ckpt.layer(i, "ln1_beta")
        sd[f"h.{i}.attn.c_attn.weight"] = ckpt.layer(i, "attn_qkv_weight")
        sd[f"h.{i}.attn.c_attn.bias"] = ckpt.layer(i, "attn_qkv_bias")
        sd[f"h.{i}.attn.c_proj.weight"] = ckpt.layer(i, "attn_out_weight")
        sd[f"h.{i}.attn.c_proj.bias"] = ckpt.layer(i, "attn_out_bias")
        sd[f"h.{i}.ln_2.weight"] = ckpt.layer(i, "ln2_gamma")
        sd[f"h.{i}.ln_2.bias"] = ckpt.layer(i, "ln2_beta")
        sd[f"h.{i}.mlp.c_fc.weight"] = ckpt.layer(i, "mlp_in_weight")
        sd[f"h.{i}.mlp.c_fc.bias"] = ckpt.layer(i, "mlp_in_bias")
        sd[f"h.{i}.mlp.c_proj.weight"] = ckpt.layer(i, "mlp_out_weight")
        sd[f"h.{i}.mlp.c_proj.bias"] = ckpt.layer(i, "mlp_out_bias")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in sd.items()})
    model.eval()
    return model


@torch.no_grad()
def hf_hidden_states(model, ids, positions, key_mask):
    out = model(
        input_ids=torch.tensor([list(ids)], dtype=torch.long),
        position_ids=torch.tensor([list(positions)], dtype=torch.long),
        attention_mask=torch.tensor([list(key_mask)], dtype=torch.long),
        output_hidden_states=True,
    )
    return [h[0].numpy().astype(np.float32) for h in out.hidden_states]


def main():
    FIXTURE_DIR.mkdir(parents=True, exist_ok=True)
    ckpt = make_fixture_checkpoint(seed=CKPT_SEED)
    model = to_hf(ckpt)
    T = len(PINNED_IDS)
    positions = list(range(T))

    causal = hf_hidden_states(model, PINNED_IDS, positions, [1] * T)
    masked = hf_hidden_states(model, PINNED_IDS, positions, PINNED_MASK)

    vocab = make_fixture_vocab()
    tt = encode(PINNED_TEXT, vocab)
    emb_rows = []
    for w in range(tt.n_words):
        win = build_windowed_input(tt, w, EMB_N)
        states = hf_hidden_states(
            model, win.token_ids, win.positions, list(win.mask.allowed)
        )
        emb_rows.append(states[EMB_LAYER][win.target_token_index])

    np.savez(
        FIXTURE_DIR / "reference_tiny.npz",
        ids=np.array(PINNED_IDS, dtype=np.int64),
        mask=np.array(PINNED_MASK, dtype=np.int8),
        **{f"causal_layer{i}": h for i, h in enumerate(causal)},
        **{f"masked_layer{i}": h for i, h in enumerate(masked)},
        embeddings_n4_layer1=np.stack(emb_rows),
    )
    print(f"wrote {FIXTURE_DIR / 'reference_tiny.npz'}")
    print("causal layer counts:", len(causal), "emb matrix:", np.stack(emb_rows).shape)


if __name__ == "__main__":
    main()
