"""Transport-payload extraction from classic libpcap captures.

Only the classic file format with an Ethernet link layer is read; each record
is parsed Ethernet -> IPv4 -> TCP/UDP and the application bytes are kept.
Anything else (ARP, IPv6, ICMP, empty segments, later fragments) is skipped
and tallied by reason.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .data import UnlabeledRecord
from .errors import NotAPcap, TruncatedCapture

LINKTYPE_ETHERNET = 1
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100
PROTO_TCP = 6
PROTO_UDP = 17

_MAGICS = {
    b"\xd4\xc3\xb2\xa1": "<",  # microsecond, little-endian writer
    b"\xa1\xb2\xc3\xd4": ">",
    b"\x4d\x3c\xb2\xa1": "<",  # nanosecond variant, same layout
    b"\xa1\xb2\x3c\x4d": ">",
}


@dataclass
class PcapExtraction:
    records: list = field(default_factory=list)
    skipped: int = 0
    skip_reasons: Counter = field(default_factory=Counter)
    packets: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _ipv4(b: bytes) -> str:
    return ".".join(str(x) for x in b)


def _transport_payload(frame: bytes):
    """Return (payload, five_tuple) or (None, skip_reason).

    Every slice is bounded by ``len(frame)``, i.e. by the record's captured
    length, so nothing past the record is ever consulted.
    """
    if len(frame) < 14:
        return None, "short-ethernet"
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    off = 14
    if ethertype == ETHERTYPE_VLAN:
        if len(frame) < 18:
            return None, "short-ethernet"
        ethertype = struct.unpack_from("!H", frame, 16)[0]
        off = 18
    if ethertype != ETHERTYPE_IPV4:
        return None, "non-ipv4"
    ip = frame[off:]
    if len(ip) < 20 or ip[0] >> 4 != 4:
        return None, "bad-ipv4"
    ihl = (ip[0] & 0x0F) * 4
    total_len = struct.unpack_from("!H", ip, 2)[0]
    frag = struct.unpack_from("!H", ip, 6)[0] & 0x1FFF
    proto = ip[9]
    if ihl < 20 or len(ip) < ihl:
        return None, "bad-ipv4"
    if frag:
        return None, "ip-fragment"
    # total length excludes Ethernet trailer padding on short frames
    ip = ip[: min(len(ip), total_len)] if total_len >= ihl else ip
    src, dst = _ipv4(ip[12:16]), _ipv4(ip[16:20])
    seg = ip[ihl:]
    if proto == PROTO_TCP:
        if len(seg) < 20:
            return None, "short-tcp"
        sport, dport = struct.unpack_from("!HH", seg, 0)
        doff = (seg[12] >> 4) * 4
        if doff < 20 or len(seg) < doff:
            return None, "short-tcp"
        payload, name = seg[doff:], "TCP"
    elif proto == PROTO_UDP:
        if len(seg) < 8:
            return None, "short-udp"
        sport, dport, ulen = struct.unpack_from("!HHH", seg, 0)
        end = min(len(seg), ulen) if ulen >= 8 else len(seg)
        payload, name = seg[8:end], "UDP"
    else:
        return None, "non-tcp-udp"
    if not payload:
        return None, "empty-payload"
    return bytes(payload), f"{name} {src}:{sport}>{dst}:{dport}"


def extract_pcap_payloads(pcap_path) -> PcapExtraction:
    """Stream a capture and return one :class:`UnlabeledRecord` per packet that
    carries a non-empty TCP or UDP payload."""
    out = PcapExtraction()
    with open(Path(pcap_path), "rb") as fh:
        header = fh.read(24)
        if len(header) < 24 or header[:4] not in _MAGICS:
            raise NotAPcap(f"{pcap_path}: not a classic pcap file")
        endian = _MAGICS[header[:4]]
        linktype = struct.unpack(endian + "I", header[20:24])[0]
        if linktype != LINKTYPE_ETHERNET:
            raise NotAPcap(f"{pcap_path}: unsupported link type {linktype}")
        index = 0
        while True:
            rec = fh.read(16)
            if not rec:
                break
            if len(rec) < 16:
                raise TruncatedCapture(index, "truncated packet header")
            _, _, incl_len, _ = struct.unpack(endian + "IIII", rec)
            frame = fh.read(incl_len)
            if len(frame) < incl_len:
                raise TruncatedCapture(index, f"captured length {incl_len}, only {len(frame)} bytes present")
            out.packets += 1
            payload, info = _transport_payload(frame)
            if payload is None:
                out.skipped += 1
                out.skip_reasons[info] += 1
            else:
                out.records.append(UnlabeledRecord(payload, index, info))
            index += 1
    return out


# --------------------------------------------------------------------------
# writers, used by demos and for building fixtures


def write_pcap(path, frames, snaplen: int = 65535) -> None:
    """Write Ethernet frames as a little-endian microsecond pcap."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        for i, frame in enumerate(frames):
            fh.write(struct.pack("<IIII", i, 0, len(frame), len(frame)))
            fh.write(frame)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def ipv4_frame(src: str, dst: str, proto: int, segment: bytes,
               src_mac=b"\x02\x00\x00\x00\x00\x01", dst_mac=b"\x02\x00\x00\x00\x00\x02") -> bytes:
    ip_src = bytes(int(x) for x in src.split("."))
    ip_dst = bytes(int(x) for x in dst.split("."))
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(segment), 0, 0x4000, 64, proto, 0, ip_src, ip_dst)
    hdr = hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]
    return dst_mac + src_mac + struct.pack("!H", ETHERTYPE_IPV4) + hdr + segment


def tcp_segment(sport: int, dport: int, payload: bytes = b"", flags: int = 0x18) -> bytes:
    return struct.pack("!HHIIBBHHH", sport, dport, 1, 0, 5 << 4, flags, 65535, 0, 0) + payload


def udp_segment(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
