# From a capture file to per-packet class probabilities.
# Run: python3 demos/03_pcap_to_predictions.py

import tempfile
from pathlib import Path

import numpy as np

from cmae_ids import data as D
from cmae_ids import model as M
from cmae_ids import train as T
from cmae_ids.evaluate import prediction_dump
from cmae_ids.pcap import extract_pcap_payloads, ipv4_frame, tcp_segment, udp_segment, write_pcap
from cmae_ids.tokenize import Tokenizer, hex2int_map

rng = np.random.default_rng(1)


def noise(n):
    return rng.integers(0, 256, n, dtype=np.uint8).tobytes()


frames = [
    ipv4_frame("10.0.0.1", "10.0.0.2", 6, tcp_segment(40000, 80, b"GET /index.html HTTP/1.1\r\n\r\n")),
    ipv4_frame("10.0.0.9", "10.0.0.2", 6, tcp_segment(40001, 80, noise(20) + D.DEFAULT_MOTIFS[D.ClassLabel.DoS] + noise(20))),
    ipv4_frame("10.0.0.7", "10.0.0.2", 17, udp_segment(5353, 53, noise(10) + D.DEFAULT_MOTIFS[D.ClassLabel.Bot])),
    ipv4_frame("10.0.0.7", "10.0.0.2", 6, tcp_segment(40002, 22, b"", flags=0x02)),  # bare SYN, no payload
]

with tempfile.TemporaryDirectory() as d:
    cap = Path(d) / "demo.pcap"
    write_pcap(cap, frames)
    ex = extract_pcap_payloads(cap)
    print(f"{ex.packets} packets, {len(ex)} payloads, skipped {dict(ex.skip_reasons)}")
    for r in ex:
        print(" ", r.packet_index, r.five_tuple, r.payload[:16].hex())

    # a few epochs on a balanced motif corpus are enough to pick up the motifs
    spec = D.SyntheticSpec(counts={c: 400 for c in D.ClassLabel}, min_length=32, max_length=96)
    split = D.stratified_split(D.generate_synthetic(spec, 0), seed=0)
    model = M.build_model(M.desk_config(max_len=128), seed=0)
    T.train_loop(model, split, T.TrainConfig(epochs=6, seed=0, target_accuracy=99.0))
    T.save_checkpoint(model, Path(d) / "m.ckpt")
    model = T.load_checkpoint(Path(d) / "m.ckpt")

    ids = Tokenizer(hex2int_map()).encode_batch([r.payload for r in ex], max_len=128)
    probs = M.predict_proba(model, ids)
    print(prediction_dump([f"packet:{r.packet_index}" for r in ex], [None] * len(ex), probs))
