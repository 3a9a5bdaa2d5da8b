# Byte tokenizers and where the CMAE parameter totals come from.
# Run: python3 demos/01_tokens_and_parameters.py

import tempfile
from pathlib import Path

from cmae_ids import model as M
from cmae_ids.tokenize import decode, encode_bytes, hex2int_map, load_hex2tok_map

payload = bytes.fromhex("00c1b114eb00")

# Hex2Int: byte b becomes b + 1, so 0 is free for padding
h2i = hex2int_map()
seq = encode_bytes(payload, h2i, max_len=10)
print("hex2int   ", seq.ids.tolist(), "true length", seq.true_length)
print("round trip", decode(seq, h2i) == payload)

# an LLM vocabulary usually places the 256 byte tokens at some offset (here 3)
with tempfile.TemporaryDirectory() as d:
    p = Path(d) / "llama2.map"
    p.write_text("".join(f"{b:02x}\t{b + 3}\n" for b in range(256)) + "PAD\t32000\n")
    llm = load_hex2tok_map(p)
    print("hex2tok   ", encode_bytes(payload, llm).ids.tolist())
    # only 257 rows of the 32k-row LLM matrix are ever used
    print("compacted vocab", llm.compacted().vocab_size)

# parameter counts, per layer
cfg = M.xavier_cmae_config()
for name, n in M.parameter_breakdown(cfg).items():
    print(f"{name:<28}{n:>10,}")
print("xavier total      %s" % format(M.count_parameters_for_config(cfg)[2], ","))

t, f, total = M.count_parameters_for_config(M.llm_hex2tok_config(frozen=True))
print(f"4096-dim frozen   trainable {t:,}  frozen {f:,}  total {total:,}")

# the embedding width only enters through the first conv layer of each CAB and MKB branch
for dim in (64, 256, 1024, 4096):
    c = M.llm_hex2tok_config(frozen=True, embedding_dim=dim)
    print(dim, format(M.count_parameters_for_config(c)[0], ","))
