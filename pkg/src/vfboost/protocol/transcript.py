"""Protocol messages and the newline-delimited JSON transcript."""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import struct
from typing import Iterable, Optional

import numpy as np

from vfboost.errors import ProtocolError, SchemaError

DIRECTIONS = ("pp_to_ap", "ap_to_pp")
KINDS = ("noise", "response", "score")
# Each expanded node exchanges exactly this sequence.
NODE_SEQUENCE = (("pp_to_ap", "noise"), ("ap_to_pp", "response"),
                 ("pp_to_ap", "score"))


def encode_payload(fields: dict) -> bytes:
    """Canonical byte encoding of named numeric arrays.

    Layout: 8-byte little-endian header length, a JSON header listing every
    field's dtype, shape and byte offset in sorted key order, then the
    little-endian array bytes. Equal inputs always give equal bytes.
    """
    header = {}
    blobs = []
    offset = 0
    for key in sorted(fields):
        arr = np.asarray(fields[key])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise TypeError(f"field {key!r} has unsupported dtype {arr.dtype}")
        raw = arr.tobytes()
        header[key] = {"dtype": arr.dtype.str, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(blobs)


def decode_payload(data: bytes) -> dict[str, np.ndarray]:
    try:
        (size,) = struct.unpack("<Q", data[:8])
        header = json.loads(data[8:8 + size])
        body = data[8 + size:]
        out = {}
        for key, field in header.items():
            raw = body[field["offset"]:field["offset"] + field["nbytes"]]
            out[key] = np.frombuffer(raw, dtype=field["dtype"]).reshape(
                field["shape"])
        return out
    except (struct.error, ValueError, KeyError) as err:
        raise SchemaError(f"malformed payload: {err}") from err


@dataclasses.dataclass(frozen=True)
class Message:
    """One protocol message; `round` is the tree index, `node` its node id."""

    round: int
    node: int
    direction: str
    kind: str
    payload: bytes

    def __post_init__(self):
        if self.direction not in DIRECTIONS or self.kind not in KINDS:
            raise ValueError(f"bad message type {self.direction}/{self.kind}")

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.payload).hexdigest()

    def fields(self) -> dict[str, np.ndarray]:
        return decode_payload(self.payload)


@dataclasses.dataclass(frozen=True)
class TranscriptRecord:
    round: int
    node: int
    direction: str
    kind: str
    sha256: str
    payload: Optional[bytes] = None

    def to_json(self) -> str:
        doc = {"round": self.round, "node": self.node, "dir": self.direction,
               "kind": self.kind, "sha256": self.sha256}
        if self.payload is not None:
            doc["payload"] = base64.b64encode(self.payload).decode("ascii")
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TranscriptRecord":
        try:
            doc = json.loads(line)
            payload = doc.get("payload")
            if payload is not None:
                payload = base64.b64decode(payload)
                if hashlib.sha256(payload).hexdigest() != doc["sha256"]:
                    raise SchemaError("payload does not match its digest")
            record = cls(int(doc["round"]), int(doc["node"]), doc["dir"],
                         doc["kind"], doc["sha256"], payload)
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"malformed transcript record: {err}") from err
        if record.direction not in DIRECTIONS or record.kind not in KINDS:
            raise SchemaError(f"bad message type {record.direction}/{record.kind}")
        return record

    def message(self) -> Message:
        if self.payload is None:
            raise SchemaError("record was stored without its payload")
        return Message(self.round, self.node, self.direction, self.kind,
                       self.payload)


class ProtocolTranscript:
    """Ordered message log, validated as it grows.

    Args:
        retain_payloads: Keep full payloads (needed for replay); otherwise only
            digests are stored.
    """

    def __init__(self, retain_payloads: bool = False):
        self.retain_payloads = retain_payloads
        self.records: list[TranscriptRecord] = []

    def append(self, message: Message) -> None:
        position = len(self.records) % len(NODE_SEQUENCE)
        expected = NODE_SEQUENCE[position]
        if (message.direction, message.kind) != expected:
            raise ProtocolError(
                f"expected {expected}, got {(message.direction, message.kind)}")
        if position and (message.round, message.node) != (
                self.records[-1].round, self.records[-1].node):
            raise ProtocolError("message interleaves two nodes")
        self.records.append(TranscriptRecord(
            message.round, message.node, message.direction, message.kind,
            message.sha256, message.payload if self.retain_payloads else None))

    def __len__(self) -> int:
        return len(self.records)

    def digest(self) -> str:
        """Digest over every record's metadata and payload digest."""
        h = hashlib.sha256()
        for rec in self.records:
            h.update(f"{rec.round}:{rec.node}:{rec.direction}:{rec.kind}:"
                     f"{rec.sha256}\n".encode())
        return h.hexdigest()

    def to_ndjson(self) -> str:
        return "".join(rec.to_json() + "\n" for rec in self.records)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ndjson())

    @classmethod
    def from_records(cls, records: Iterable[TranscriptRecord]
                     ) -> "ProtocolTranscript":
        records = list(records)
        out = cls(retain_payloads=all(r.payload is not None for r in records))
        for rec in records:
            if out.retain_payloads:
                out.append(rec.message())
            else:
                out.append(Message(rec.round, rec.node, rec.direction, rec.kind,
                                   b""))
                out.records[-1] = rec
        return out

    @classmethod
    def read(cls, path: str) -> "ProtocolTranscript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_records(TranscriptRecord.from_json(line)
                                    for line in fh if line.strip())

    def node_triples(self) -> list[tuple[TranscriptRecord, TranscriptRecord,
                                         TranscriptRecord]]:
        if len(self.records) % 3:
            raise ProtocolError("transcript ends in the middle of a node")
        return [tuple(self.records[i:i + 3])
                for i in range(0, len(self.records), 3)]
