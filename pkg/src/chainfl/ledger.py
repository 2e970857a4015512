"""Append-only, proof-of-work sealed chain of signed model-hash records.

Binary layouts (all integers little-endian):

record payload  = u16 len + address utf-8 | u64 round | 32B model_hash |
                  f64 reported_accuracy | u64 data_size | u64 timestamp |
                  u64 sequence_number
record          = payload | u16 len + signature
block header    = u64 index | 32B prev_hash | 32B payload_hash | u32 difficulty |
                  u16 len + miner_id utf-8 | u64 block_timestamp | u64 nonce
block           = header | u32 record count | (u32 len + record)*

The block hash is SHA-256 of the header. ``payload_hash`` is a Merkle root over
SHA-256 digests of the serialized records.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import InvalidInputError, MiningFailedError
from .fl_core import ModelParameters

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)
MAX_NONCE = 2**64 - 1
DEFAULT_DIFFICULTY = 12


class Digest(bytes):
    """A 32-byte SHA-256 output."""

    def __new__(cls, value: bytes):
        value = bytes(value)
        if len(value) != DIGEST_SIZE:
            raise InvalidInputError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def of(cls, data: bytes) -> "Digest":
        return cls(hashlib.sha256(data).digest())

    def __repr__(self):
        return f"Digest({self.hex()[:16]}...)"


def hash_model(params: ModelParameters) -> Digest:
    if len(params) == 0:
        raise InvalidInputError("cannot hash an empty parameter sequence")
    return Digest.of(params.canonical_bytes())


# -- keys and signatures ------------------------------------------------------


class KeyPair:
    """Ed25519 signing key with its raw public key and derived address."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._private = private_key
        self.public_key: bytes = private_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        return cls(Ed25519PrivateKey.from_private_bytes(bytes(seed)))

    def __deepcopy__(self, memo):
        return self  # immutable

    @property
    def address(self) -> str:
        return address_for(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


def address_for(public_key: bytes) -> str:
    return "0x" + hashlib.sha256(public_key).digest()[:20].hex()


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


class AuthorizationList(Mapping[str, bytes]):
    """Read-only mapping of registered address -> raw public key."""

    def __init__(self, entries: Mapping[str, bytes] | Iterable[tuple[str, bytes]] = ()):
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        data: dict[str, bytes] = {}
        for address, key in items:
            if address in data:
                raise InvalidInputError(f"duplicate address {address} in authorization list")
            data[address] = bytes(key)
        self._data = data

    @classmethod
    def from_keys(cls, keys: Iterable[KeyPair]) -> "AuthorizationList":
        return cls((k.address, k.public_key) for k in keys)

    def __getitem__(self, address: str) -> bytes:
        return self._data[address]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def to_json(self) -> dict:
        return {a: k.hex() for a, k in sorted(self._data.items())}

    @classmethod
    def from_json(cls, doc: Mapping[str, str]) -> "AuthorizationList":
        return cls((a, bytes.fromhex(k)) for a, k in doc.items())


# -- serialization helpers ----------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_blob(b: bytes) -> bytes:
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise InvalidInputError("truncated serialization")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def blob(self) -> bytes:
        (n,) = self.unpack("<H")
        return self.take(n)

    def string(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidInputError(f"bad utf-8 field: {exc}") from None

    def done(self) -> bool:
        return self.pos == len(self.data)


# -- records and blocks -------------------------------------------------------


@dataclass(frozen=True)
class ModelRecord:
    client_address: str
    round: int
    model_hash: Digest
    reported_accuracy: float
    data_size: int
    timestamp: int
    sequence_number: int
    signature: bytes = b""

    def payload_bytes(self) -> bytes:
        return (
            _pack_str(self.client_address)
            + struct.pack("<Q", self.round)
            + bytes(self.model_hash)
            + struct.pack("<d", self.reported_accuracy)
            + struct.pack("<QQQ", self.data_size, self.timestamp, self.sequence_number)
        )

    def to_bytes(self) -> bytes:
        return self.payload_bytes() + _pack_blob(self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelRecord":
        r = _Reader(data)
        rec = cls._read(r)
        if not r.done():
            raise InvalidInputError("trailing bytes after record")
        return rec

    @classmethod
    def _read(cls, r: _Reader) -> "ModelRecord":
        address = r.string()
        (rnd,) = r.unpack("<Q")
        model_hash = Digest(r.take(DIGEST_SIZE))
        (acc,) = r.unpack("<d")
        size, ts, seq = r.unpack("<QQQ")
        sig = r.blob()
        return cls(address, rnd, model_hash, acc, size, ts, seq, sig)

    def digest(self) -> Digest:
        return Digest.of(self.to_bytes())

    def signed(self, key: KeyPair) -> "ModelRecord":
        return replace(self, signature=key.sign(self.payload_bytes()))

    def to_json(self) -> dict:
        return {
            "client_address": self.client_address,
            "round": self.round,
            "model_hash": self.model_hash.hex(),
            "reported_accuracy": self.reported_accuracy,
            "data_size": self.data_size,
            "timestamp": self.timestamp,
            "sequence_number": self.sequence_number,
            "signature": base64.b64encode(self.signature).decode("ascii"),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelRecord":
        return cls(
            client_address=str(doc["client_address"]),
            round=int(doc["round"]),
            model_hash=Digest(bytes.fromhex(doc["model_hash"])),
            reported_accuracy=float(doc["reported_accuracy"]),
            data_size=int(doc["data_size"]),
            timestamp=int(doc["timestamp"]),
            sequence_number=int(doc["sequence_number"]),
            signature=base64.b64decode(doc["signature"]),
        )


def make_record(
    key: KeyPair,
    round: int,
    params: ModelParameters,
    reported_accuracy: float,
    data_size: int,
    timestamp: int,
    sequence_number: int,
    address: Optional[str] = None,
) -> ModelRecord:
    """Build and sign a record committing to ``hash_model(params)``."""
    if not 0.0 <= reported_accuracy <= 1.0:
        raise InvalidInputError("reported_accuracy must lie in [0, 1]")
    if data_size < 1:
        raise InvalidInputError("data_size must be positive")
    rec = ModelRecord(
        client_address=address if address is not None else key.address,
        round=round,
        model_hash=hash_model(params),
        reported_accuracy=float(reported_accuracy),
        data_size=int(data_size),
        timestamp=int(timestamp),
        sequence_number=int(sequence_number),
    )
    return rec.signed(key)


def merkle_root(leaves: list[bytes]) -> Digest:
    if not leaves:
        return Digest.of(b"")
    level = [bytes(x) for x in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hashlib.sha256(level[i] + level[i + 1]).digest() for i in range(0, len(level), 2)]
    return Digest(level[0])


def payload_hash(records: Iterable[ModelRecord]) -> Digest:
    return merkle_root([r.digest() for r in records])


def leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return len(digest) * 8 - value.bit_length()


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: Digest
    payload_hash: Digest
    records: tuple[ModelRecord, ...]
    nonce: int
    difficulty: int
    miner_id: str
    block_timestamp: int
    hash: Digest = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "hash", Digest.of(self.header_bytes()))

    def header_prefix(self) -> bytes:
        """Header bytes up to (excluding) the nonce."""
        return (
            struct.pack("<Q", self.index)
            + bytes(self.prev_hash)
            + bytes(self.payload_hash)
            + struct.pack("<I", self.difficulty)
            + _pack_str(self.miner_id)
            + struct.pack("<Q", self.block_timestamp)
        )

    def header_bytes(self) -> bytes:
        return self.header_prefix() + struct.pack("<Q", self.nonce)

    def meets_difficulty(self) -> bool:
        return leading_zero_bits(self.hash) >= self.difficulty

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes(), struct.pack("<I", len(self.records))]
        for rec in self.records:
            raw = rec.to_bytes()
            parts.append(struct.pack("<I", len(raw)) + raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        r = _Reader(data)
        (index,) = r.unpack("<Q")
        prev = Digest(r.take(DIGEST_SIZE))
        ph = Digest(r.take(DIGEST_SIZE))
        (difficulty,) = r.unpack("<I")
        miner = r.string()
        (ts,) = r.unpack("<Q")
        (nonce,) = r.unpack("<Q")
        (count,) = r.unpack("<I")
        records = []
        for _ in range(count):
            (n,) = r.unpack("<I")
            records.append(ModelRecord.from_bytes(r.take(n)))
        if not r.done():
            raise InvalidInputError("trailing bytes after block")
        return cls(index, prev, ph, tuple(records), nonce, difficulty, miner, ts)

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "hash": self.hash.hex(),
            "prev_hash": self.prev_hash.hex(),
            "payload_hash": self.payload_hash.hex(),
            "nonce": self.nonce,
            "difficulty": self.difficulty,
            "miner_id": self.miner_id,
            "block_timestamp": self.block_timestamp,
            "records": [r.to_json() for r in self.records],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Block":
        block = cls(
            index=int(doc["index"]),
            prev_hash=Digest(bytes.fromhex(doc["prev_hash"])),
            payload_hash=Digest(bytes.fromhex(doc["payload_hash"])),
            records=tuple(ModelRecord.from_json(r) for r in doc["records"]),
            nonce=int(doc["nonce"]),
            difficulty=int(doc["difficulty"]),
            miner_id=str(doc["miner_id"]),
            block_timestamp=int(doc["block_timestamp"]),
        )
        if "hash" in doc and doc["hash"] != block.hash.hex():
            raise InvalidInputError(f"block {block.index}: stored hash does not match header")
        return block


def _search_nonce(prefix: bytes, difficulty: int, max_nonce: int) -> int:
    base = hashlib.sha256(prefix)
    pack = struct.Struct("<Q").pack
    threshold = 1 << (256 - difficulty) if difficulty <= 256 else 0
    for nonce in range(max_nonce + 1):
        h = base.copy()
        h.update(pack(nonce))
        if int.from_bytes(h.digest(), "big") < threshold:
            return nonce
    raise MiningFailedError(f"no nonce in [0, {max_nonce}] meets difficulty {difficulty}")


def mine_block(
    records: Iterable[ModelRecord],
    prev: Optional[Block],
    difficulty: int = DEFAULT_DIFFICULTY,
    miner_id: str = "miner-0",
    block_timestamp: int = 0,
    max_nonce: int = MAX_NONCE,
) -> Block:
    """Seal ``records`` into a block on top of ``prev`` (``None`` for genesis).

    The nonce is the smallest value in ``[0, max_nonce]`` whose header hash has
    at least ``difficulty`` leading zero bits, so mining is reproducible.
    """
    if difficulty < 0:
        raise InvalidInputError("difficulty must be non-negative")
    records = tuple(records)
    index = 0 if prev is None else prev.index + 1
    prev_hash = Digest(ZERO_DIGEST) if prev is None else prev.hash
    draft = Block(index, prev_hash, payload_hash(records), records, 0, difficulty, miner_id, block_timestamp)
    if difficulty > 256:
        raise MiningFailedError(f"difficulty {difficulty} exceeds the 256-bit hash width")
    nonce = _search_nonce(draft.header_prefix(), difficulty, max_nonce)
    return replace(draft, nonce=nonce)


def genesis_block(difficulty: int = DEFAULT_DIFFICULTY, miner_id: str = "genesis") -> Block:
    return mine_block((), None, difficulty, miner_id, 0)


def verify_identity(record: ModelRecord, auth: Mapping[str, bytes]) -> bool:
    key = auth.get(record.client_address)
    if key is None:
        return False
    return verify_signature(key, record.payload_bytes(), record.signature)


@dataclass(frozen=True)
class ChainCheck:
    valid: bool
    reason: str = "ok"
    block_index: Optional[int] = None

    def __bool__(self) -> bool:
        return self.valid


def check_chain(
    chain: list[Block],
    auth: Mapping[str, bytes],
    difficulty: Optional[int] = None,
    start: int = 0,
    last_seq: Optional[dict[str, int]] = None,
) -> ChainCheck:
    """Validate ``chain`` and report the first violated invariant.

    ``difficulty`` is the minimum every block must meet; by default the genesis
    block's difficulty is required of every block. ``start``/``last_seq`` let a
    caller re-check only a freshly appended suffix.
    """
    if not chain:
        return ChainCheck(False, "empty_chain")
    genesis = chain[0]
    if start == 0:
        if genesis.index != 0 or genesis.prev_hash != ZERO_DIGEST or genesis.records:
            return ChainCheck(False, "bad_genesis", 0)
    required = genesis.difficulty if difficulty is None else difficulty
    seqs = dict(last_seq or {})
    for pos in range(start, len(chain)):
        block = chain[pos]
        if block.difficulty < required or (difficulty is None and block.difficulty != required):
            return ChainCheck(False, "difficulty_mismatch", block.index)
        if not block.meets_difficulty():
            return ChainCheck(False, "insufficient_work", block.index)
        if pos > 0:
            prev = chain[pos - 1]
            if block.index != prev.index + 1:
                return ChainCheck(False, "non_consecutive_index", block.index)
            if block.prev_hash != prev.hash:
                return ChainCheck(False, "prev_hash_mismatch", block.index)
        if block.payload_hash != payload_hash(block.records):
            return ChainCheck(False, "payload_hash_mismatch", block.index)
        for rec in block.records:
            if not verify_identity(rec, auth):
                return ChainCheck(False, "bad_signature", block.index)
            prev_seq = seqs.get(rec.client_address)
            if prev_seq is not None and rec.sequence_number <= prev_seq:
                return ChainCheck(False, "sequence_not_increasing", block.index)
            seqs[rec.client_address] = rec.sequence_number
    return ChainCheck(True)


def validate_chain(chain: list[Block], auth: Mapping[str, bytes], difficulty: Optional[int] = None) -> bool:
    return check_chain(chain, auth, difficulty).valid


def iter_records(chain: Iterable[Block]):
    for block in chain:
        yield from block.records


def latest_record_for(
    chain: Iterable[Block], client_address: str, before_round: Optional[int] = None
) -> Optional[ModelRecord]:
    """Highest-sequence record for ``client_address``.

    With ``before_round`` only records whose ``round`` is strictly smaller are
    considered, i.e. the history as it stood when that round opened.
    """
    best = None
    for rec in iter_records(chain):
        if rec.client_address != client_address:
            continue
        if before_round is not None and rec.round >= before_round:
            continue
        if best is None or rec.sequence_number > best.sequence_number:
            best = rec
    return best


class Chain:
    """Single-writer chain with an address index for fast lookups."""

    def __init__(self, auth: AuthorizationList, difficulty: int = DEFAULT_DIFFICULTY, genesis: Optional[Block] = None):
        self.auth = auth
        self.difficulty = difficulty
        self.blocks: list[Block] = [genesis or genesis_block(difficulty)]
        self._by_address: dict[str, list[ModelRecord]] = {}
        self._last_seq: dict[str, int] = {}

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def append(self, block: Block) -> None:
        """Append after checking the new block against the current head."""
        check = check_chain(self.blocks + [block], self.auth, self.difficulty, start=len(self.blocks), last_seq=self._last_seq)
        if not check:
            raise InvalidInputError(f"block {block.index} rejected: {check.reason}")
        self.blocks.append(block)
        for rec in block.records:
            self._by_address.setdefault(rec.client_address, []).append(rec)
            self._last_seq[rec.client_address] = rec.sequence_number

    def mine_and_append(self, records: Iterable[ModelRecord], miner_id: str, block_timestamp: int) -> Block:
        block = mine_block(records, self.head, self.difficulty, miner_id, block_timestamp)
        self.append(block)
        return block

    def records_for(self, client_address: str) -> list[ModelRecord]:
        return list(self._by_address.get(client_address, ()))

    def latest_record_for(self, client_address: str, before_round: Optional[int] = None) -> Optional[ModelRecord]:
        best = None
        for rec in self._by_address.get(client_address, ()):
            if before_round is not None and rec.round >= before_round:
                continue
            if best is None or rec.sequence_number > best.sequence_number:
                best = rec
        return best

    def find_record(self, client_address: str, round: int, sequence_number: int) -> Optional[ModelRecord]:
        for rec in self._by_address.get(client_address, ()):
            if rec.round == round and rec.sequence_number == sequence_number:
                return rec
        return None

    def validate(self) -> ChainCheck:
        return check_chain(self.blocks, self.auth, self.difficulty)


def chain_to_json(chain: Iterable[Block]) -> list[dict]:
    return [b.to_json() for b in chain]


def chain_from_json(doc: list[dict]) -> list[Block]:
    return [Block.from_json(b) for b in doc]


def export_chain(chain: Iterable[Block], path: str | Path, auth: Optional[AuthorizationList] = None) -> None:
    doc = {"blocks": chain_to_json(chain)}
    if auth is not None:
        doc["authorization_list"] = auth.to_json()
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def import_chain(path: str | Path) -> tuple[list[Block], Optional[AuthorizationList]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    blocks = chain_from_json(doc["blocks"])
    auth = doc.get("authorization_list")
    return blocks, (AuthorizationList.from_json(auth) if auth is not None else None)
