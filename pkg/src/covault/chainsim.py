"""Deterministic single-view chain: UTXO set, mempool with replacement,
ancestor-feerate block building, relative locks, confirmations and
adversarial fee events.

Competing network traffic during a fee spike is virtual filler: it claims
block space at the spike feerate without touching the UTXO set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import crypto, script, taproot, txmodel
from .txmodel import Transaction, TxInput, TxOutput

Outpoint = Tuple[bytes, int]

KEY_OUTPUT = 0x00  # script = 0x00 || 33-byte key, spent with one segwit_v0 signature


def key_script(pub: crypto.GroupPoint) -> bytes:
    return bytes([KEY_OUTPUT]) + pub.data


@dataclass
class ChainConfig:
    min_relay_feerate: int = 1  # sat/byte
    block_size: int = 100_000
    deep_confirmations: int = 6
    ctv_enabled: bool = False
    inspect_enabled: bool = False


@dataclass(frozen=True)
class Accepted:
    txid: bytes
    ok: bool = True

    def __bool__(self):
        return True


@dataclass(frozen=True)
class Rejected:
    reason: str
    detail: str = ""
    ok: bool = False

    def __bool__(self):
        return False


Result = Accepted | Rejected


@dataclass
class UtxoEntry:
    output: TxOutput
    height: int
    txid: bytes


@dataclass
class MempoolEntry:
    tx: Transaction
    fee: int
    size: int
    arrival: int

    @property
    def feerate(self) -> float:
        return self.fee / self.size


@dataclass
class Block:
    height: int
    txs: List[Transaction]
    fees: int = 0
    filler_bytes: int = 0
    mints: List[Transaction] = field(default_factory=list)


@dataclass
class FeeSpike:
    level: int
    start: int
    end: int  # exclusive height
    budget: Optional[int] = None
    spent: int = 0


class EventLog:
    def __init__(self):
        self.records: List[dict] = []

    def emit(self, height: int, event: str, txid: Optional[bytes] = None, detail=None):
        self.records.append({
            "height": height, "event": event,
            "txid": txid.hex() if txid else None, "detail": detail if detail is not None else {},
        })

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def signature_elements(tx: Transaction) -> List[List[bytes]]:
    """Per input, the 65-byte signature elements of its witness stack
    (script and control block excluded for script-path spends)."""
    out = []
    for wit in tx.witnesses:
        stack = list(wit)
        if len(stack) >= 2 and stack[-1][:1] == bytes([txmodel.ANNEX_TAG]):
            stack.pop()
        if len(stack) >= 3:
            try:
                stack = list(taproot.split_script_path_witness(wit)[0])
            except Exception:
                pass
        out.append([e for e in stack if len(e) == 65])
    return out


class Chain:
    """Chain state plus mempool; ``height`` is the tip block's height."""

    def __init__(self, config: Optional[ChainConfig] = None, log: Optional[EventLog] = None):
        self.config = config or ChainConfig()
        self.log = log or EventLog()
        self.blocks: List[Block] = [Block(0, [])]
        self.utxos: Dict[Outpoint, UtxoEntry] = {}
        self.spent: Dict[Outpoint, bytes] = {}
        self.tx_height: Dict[bytes, int] = {}
        self.txs: Dict[bytes, Transaction] = {}
        self.mempool: Dict[bytes, MempoolEntry] = {}
        self.mempool_spends: Dict[Outpoint, bytes] = {}
        self.spikes: List[FeeSpike] = []
        self._arrivals = 0
        self._mints = 0

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    # funding

    def fund(self, script_pubkey: bytes, amount: int) -> Outpoint:
        """Create an output from nothing in the tip block (faucet)."""
        self._mints += 1
        tx = Transaction(0, (), (TxOutput(amount, script_pubkey),), (), self._mints)
        tid = tx.txid
        self.blocks[-1].mints.append(tx)
        self._apply(tx, self.height)
        self.log.emit(self.height, "fund", tid, {"amount": amount})
        return (tid, 0)

    # lookups

    def get_tx(self, txid: bytes) -> Optional[Transaction]:
        if txid in self.txs:
            return self.txs[txid]
        entry = self.mempool.get(txid)
        return entry.tx if entry else None

    def output(self, outpoint: Outpoint) -> Optional[TxOutput]:
        if outpoint in self.utxos:
            return self.utxos[outpoint].output
        tx = self.get_tx(outpoint[0])
        if tx is not None and outpoint[1] < len(tx.outputs):
            return tx.outputs[outpoint[1]]
        return None

    def confirmations(self, txid: bytes) -> int:
        h = self.tx_height.get(txid)
        return 0 if h is None else self.height - h + 1

    def is_confirmed(self, txid: bytes) -> bool:
        return txid in self.tx_height

    def spender(self, outpoint: Outpoint) -> Optional[bytes]:
        return self.spent.get(outpoint) or self.mempool_spends.get(outpoint)

    def in_mempool(self, txid: bytes) -> bool:
        return txid in self.mempool

    # validation

    def _prevout(self, op: Outpoint) -> Tuple[Optional[TxOutput], Optional[int], str]:
        """(output, confirmed height or None for mempool parent, error reason)."""
        if op in self.utxos:
            e = self.utxos[op]
            return e.output, e.height, ""
        if op in self.spent:
            return None, None, "DoubleSpend"
        parent = self.mempool.get(op[0])
        if parent is not None and op[1] < len(parent.tx.outputs):
            return parent.tx.outputs[op[1]], None, ""
        return None, None, "MissingInputs"

    def check_tx(self, tx: Transaction, ignore_conflicts: Iterable[bytes] = (),
                 fee_floor: bool = True) -> Tuple[Optional[int], Rejected | None]:
        """Validate for the next block; returns (fee, None) or (None, Rejected)."""
        ignore = set(ignore_conflicts)
        if not tx.inputs or not tx.outputs:
            return None, Rejected("Malformed", "empty inputs or outputs")
        if tx.txid in self.mempool or tx.txid in self.tx_height:
            return None, Rejected("Duplicate")
        seen = set()
        prevouts: List[TxOutput] = []
        heights: List[Optional[int]] = []
        for txin in tx.inputs:
            op = txin.outpoint
            if op in seen:
                return None, Rejected("DoubleSpend", "duplicate input")
            seen.add(op)
            out, h, err = self._prevout(op)
            if err:
                return None, Rejected(err, op[0].hex())
            if op[0] in ignore:
                return None, Rejected("MissingInputs", "spends a replaced transaction")
            other = self.mempool_spends.get(op)
            if other is not None and other not in ignore:
                return None, Rejected("DoubleSpend", other.hex())
            prevouts.append(out)
            heights.append(h)
        fee = sum(p.amount for p in prevouts) - tx.output_total()
        if fee < 0:
            return None, Rejected("ValueOut")
        next_height = self.height + 1
        for i, txin in enumerate(tx.inputs):
            lock = txmodel.decode_relative_lock(tx.version, txin.sequence)
            age = 0 if heights[i] is None else next_height - heights[i]
            if lock is not None and age < lock:
                return None, Rejected("PrematureLock", f"input {i}: age {age} < {lock}")
            err = self._check_witness(tx, i, prevouts, lock or 0)
            if err is not None:
                return None, err
        if fee_floor and fee < self.config.min_relay_feerate * tx.size:
            return None, Rejected("FeeTooLow", f"{fee} < {self.config.min_relay_feerate * tx.size}")
        return fee, None

    def _check_witness(self, tx: Transaction, i: int, prevouts: Sequence[TxOutput], lock: int) -> Optional[Rejected]:
        spk = prevouts[i].script
        wit = tx.witnesses[i]
        if len(spk) == 34 and spk[0] == KEY_OUTPUT:
            pub = crypto.GroupPoint(spk[1:])
            annex_ok = len(wit) == 1 or (len(wit) == 2 and wit[1][:1] == bytes([txmodel.ANNEX_TAG]))
            if wit and annex_ok and txmodel.verify_input(tx, i, pub, wit[0], txmodel.Semantics.SEGWIT_V0, prevouts):
                return None
            return Rejected("BadWitness", f"input {i}: key signature")
        if len(spk) == 33 and spk[0] == taproot.P2TR_VERSION:
            try:
                stack, leaf, cb, _annex = taproot.split_script_path_witness(wit)
            except Exception as exc:
                return Rejected("BadWitness", f"input {i}: {exc}")
            if not taproot.verify_control_block(spk[1:], leaf, cb):
                return Rejected("BadWitness", f"input {i}: control block")
            ctx = script.SatisfactionContext(
                check_sig=lambda pub, sig: txmodel.verify_tapscript_sig(tx, i, pub, sig, prevouts),
                age=lock, tx=tx, input_index=i, prevouts=prevouts,
                ctv_enabled=self.config.ctv_enabled, inspect_enabled=self.config.inspect_enabled,
            )
            res = script.execute(leaf.script, stack, ctx)
            if not res:
                reason = "PrematureLock" if res.reason == "PrematureLock" else "BadWitness"
                return Rejected(reason, f"input {i}: {res.reason}")
            return None
        return Rejected("BadWitness", f"input {i}: unspendable script")

    # mempool

    def _add_to_mempool(self, tx: Transaction, fee: int) -> None:
        self._arrivals += 1
        tid = tx.txid
        self.mempool[tid] = MempoolEntry(tx, fee, tx.size, self._arrivals)
        for txin in tx.inputs:
            self.mempool_spends[txin.outpoint] = tid

    def _remove_from_mempool(self, tid: bytes) -> None:
        entry = self.mempool.pop(tid)
        for txin in entry.tx.inputs:
            if self.mempool_spends.get(txin.outpoint) == tid:
                del self.mempool_spends[txin.outpoint]

    def descendants(self, tid: bytes) -> List[bytes]:
        out: List[bytes] = []
        frontier = [tid]
        while frontier:
            cur = frontier.pop()
            for child_id, entry in self.mempool.items():
                if child_id not in out and any(i.prev_txid == cur for i in entry.tx.inputs):
                    out.append(child_id)
                    frontier.append(child_id)
        return out

    def ancestors(self, tid: bytes) -> List[bytes]:
        out: List[bytes] = []
        frontier = [tid]
        while frontier:
            cur = frontier.pop()
            for txin in self.mempool[cur].tx.inputs:
                p = txin.prev_txid
                if p in self.mempool and p not in out:
                    out.append(p)
                    frontier.append(p)
        return out

    def submit(self, tx: Transaction) -> Result:
        fee, err = self.check_tx(tx)
        if err is not None:
            self.log.emit(self.height, "reject", tx.txid, {"reason": err.reason, "detail": err.detail})
            return err
        self._add_to_mempool(tx, fee)
        self.log.emit(self.height, "accept", tx.txid, {"fee": fee, "size": tx.size})
        return Accepted(tx.txid)

    def submit_package(self, txs: Sequence[Transaction]) -> List[Result]:
        """Parents first; individual fee floors are waived when the package
        as a whole pays min-relay. All-or-nothing."""
        added: List[bytes] = []
        results: List[Result] = []
        for tx in txs:
            fee, err = self.check_tx(tx, fee_floor=False)
            if err is not None:
                for t in reversed(added):
                    self._remove_from_mempool(t)
                self.log.emit(self.height, "reject", tx.txid, {"reason": err.reason, "detail": err.detail})
                return results + [err]
            self._add_to_mempool(tx, fee)
            added.append(tx.txid)
            results.append(Accepted(tx.txid))
        total_fee = sum(self.mempool[t].fee for t in added)
        total_size = sum(self.mempool[t].size for t in added)
        if total_fee < self.config.min_relay_feerate * total_size:
            for t in reversed(added):
                self._remove_from_mempool(t)
            self.log.emit(self.height, "reject", added[-1], {"reason": "FeeTooLow", "detail": "package"})
            return [Rejected("FeeTooLow", "package")] * len(added)
        for t in added:
            e = self.mempool[t]
            self.log.emit(self.height, "accept", t, {"fee": e.fee, "size": e.size, "package": True})
        return results

    def conflicts(self, tx: Transaction) -> List[bytes]:
        direct = []
        for txin in tx.inputs:
            other = self.mempool_spends.get(txin.outpoint)
            if other is not None and other not in direct:
                direct.append(other)
        out = list(direct)
        for d in direct:
            out += [x for x in self.descendants(d) if x not in out]
        return out

    def replace(self, tx: Transaction) -> Result:
        """Replacement: every conflict signals, absolute fee strictly higher and
        the increment pays for the new tx at the relay feerate."""
        replaced = self.conflicts(tx)
        if not replaced:
            return self.submit(tx)
        direct = [t for t in replaced if any(
            self.mempool_spends.get(i.outpoint) == t for i in tx.inputs)]
        for t in direct:
            if not any(txmodel.signals_rbf(i.sequence) for i in self.mempool[t].tx.inputs):
                self.log.emit(self.height, "reject", tx.txid, {"reason": "NotSignaling"})
                return Rejected("NotSignaling", t.hex())
        fee, err = self.check_tx(tx, ignore_conflicts=replaced)
        if err is not None:
            self.log.emit(self.height, "reject", tx.txid, {"reason": err.reason, "detail": err.detail})
            return err
        old_fee = sum(self.mempool[t].fee for t in replaced)
        if fee <= old_fee or fee - old_fee < self.config.min_relay_feerate * tx.size:
            self.log.emit(self.height, "reject", tx.txid, {"reason": "FeeNotHigher"})
            return Rejected("FeeNotHigher", f"{fee} vs {old_fee}")
        for t in replaced:
            self._remove_from_mempool(t)
            self.log.emit(self.height, "evict", t, {"by": tx.txid.hex()})
        self._add_to_mempool(tx, fee)
        self.log.emit(self.height, "replace", tx.txid, {"fee": fee, "replaced": [t.hex() for t in replaced]})
        return Accepted(tx.txid)

    # fee market

    def fee_spike(self, level: int, duration: int, budget: Optional[int] = None) -> FeeSpike:
        """Competing traffic at ``level`` sat/byte filling whole blocks for
        ``duration`` blocks, or until ``budget`` satoshis of filler fees run out."""
        spike = FeeSpike(level, self.height + 1, self.height + 1 + duration, budget)
        self.spikes.append(spike)
        self.log.emit(self.height, "fee_spike", None, {"level": level, "duration": duration, "budget": budget})
        return spike

    def _active_spike(self, height: int) -> Optional[FeeSpike]:
        best = None
        for s in self.spikes:
            if s.level <= 0 or not s.start <= height < s.end:
                continue
            if s.budget is not None and s.spent + s.level * self.config.block_size > s.budget:
                continue
            if best is None or s.level > best.level:
                best = s
        return best

    def competing_feerate(self, height: Optional[int] = None) -> int:
        s = self._active_spike(self.height + 1 if height is None else height)
        return s.level if s else 0

    # blocks

    def mine_block(self) -> Block:
        height = self.height + 1
        budget = self.config.block_size
        spike = self._active_spike(height)
        selected: List[bytes] = []
        chosen = set()
        failed = set()
        filler_bytes = 0
        while True:
            best = None
            for tid, entry in self.mempool.items():
                if tid in chosen or tid in failed:
                    continue
                pkg = [a for a in self.ancestors(tid) if a not in chosen] + [tid]
                fee = sum(self.mempool[t].fee for t in pkg)
                size = sum(self.mempool[t].size for t in pkg)
                key = (fee * 10**6 // size, -entry.arrival)
                if best is None or key > best[0]:
                    best = (key, tid, pkg, size)
            if best is None:
                break
            (rate_key, _), tid, pkg, size = best[0], best[1], best[2], best[3]
            if spike is not None and rate_key <= spike.level * 10**6:
                # filler outbids the rest of the mempool
                filler_bytes = budget
                budget = 0
                break
            if size > budget:
                failed.add(tid)
                continue
            for t in self._topo(pkg):
                chosen.add(t)
                selected.append(t)
            budget -= size
        if spike is not None and budget > 0:
            filler_bytes += budget
        if spike is not None:
            spike.spent += spike.level * filler_bytes
        txs = [self.mempool[t].tx for t in selected]
        fees = sum(self.mempool[t].fee for t in selected)
        for t in selected:
            self._remove_from_mempool(t)
        block = Block(height, txs, fees, filler_bytes)
        self.blocks.append(block)
        for tx in txs:
            self._apply(tx, height)
        self._evict_invalid()
        self.log.emit(height, "block", None, {"txs": [t.txid.hex() for t in txs], "fees": fees,
                                              "filler_bytes": filler_bytes})
        return block

    def mine(self, n: int = 1) -> List[Block]:
        return [self.mine_block() for _ in range(n)]

    def _topo(self, pkg: List[bytes]) -> List[bytes]:
        ordered: List[bytes] = []
        remaining = list(pkg)
        while remaining:
            for t in remaining:
                deps = [i.prev_txid for i in self.mempool[t].tx.inputs if i.prev_txid in remaining and i.prev_txid != t]
                if not deps:
                    ordered.append(t)
                    remaining.remove(t)
                    break
        return ordered

    def _apply(self, tx: Transaction, height: int) -> None:
        tid = tx.txid
        for txin in tx.inputs:
            del self.utxos[txin.outpoint]
            self.spent[txin.outpoint] = tid
        for idx, out in enumerate(tx.outputs):
            self.utxos[(tid, idx)] = UtxoEntry(out, height, tid)
        self.tx_height[tid] = height
        self.txs[tid] = tx

    def _evict_invalid(self) -> None:
        changed = True
        while changed:
            changed = False
            for tid in list(self.mempool):
                entry = self.mempool[tid]
                bad = any(i.outpoint in self.spent for i in entry.tx.inputs) or any(
                    i.outpoint not in self.utxos and i.prev_txid not in self.mempool for i in entry.tx.inputs)
                if bad:
                    self._remove_from_mempool(tid)
                    self.log.emit(self.height, "evict", tid, {"reason": "conflict"})
                    changed = True

    # adversary: pinning

    def pin(self, target_txid: bytes, junk_bytes: int, attacker_priv: int, funding: Outpoint) -> Result:
        """Replace ``target`` with a copy carrying one extra attacker input
        padded with ``junk_bytes`` of annex. Only possible when no signature
        on the target commits to the input set."""
        entry = self.mempool.get(target_txid)
        if entry is None:
            return Rejected("NotInMempool")
        tx = entry.tx
        if not any(txmodel.signals_rbf(i.sequence) for i in tx.inputs):
            return Rejected("NotSignaling")
        for i, sigs in enumerate(signature_elements(tx)):
            if not sigs:
                return Rejected("Immutable", f"input {i} carries no signatures")
            for s in sigs:
                if not txmodel.sig_flag(s).anyonecanpay:
                    return Rejected("Immutable", f"input {i} signed {txmodel.sig_flag(s)}")
        fund_out = self.output(funding)
        if fund_out is None:
            return Rejected("MissingInputs", "attacker funding")
        # the low-value attacker input goes entirely to fee; outputs stay as signed
        junk_in = TxInput(funding[0], funding[1], 0xFFFFFFFD)
        annex = bytes([txmodel.ANNEX_TAG]) + b"\x00" * max(0, junk_bytes - 1)
        unsigned = Transaction(tx.version, tx.inputs + (junk_in,), tx.outputs, tx.witnesses, tx.locktime)
        if fund_out.amount < self.config.min_relay_feerate * unsigned.with_witness(
                len(unsigned.inputs) - 1, (b"\x00" * 65, annex)).size:
            return Rejected("Insufficient", "attacker input does not cover the replacement increment")
        prevouts = [self.output(i.outpoint) for i in unsigned.inputs]
        idx = len(unsigned.inputs) - 1
        sig = txmodel.sign_input(unsigned, idx, attacker_priv, txmodel.Semantics.SEGWIT_V0, txmodel.ALL, prevouts)
        pinned = unsigned.with_witness(idx, (sig, annex))
        self.log.emit(self.height, "pin", target_txid, {"junk_bytes": junk_bytes})
        return self.replace(pinned)

    # audit

    def audit(self) -> List[str]:
        """Replay every block from scratch; return a list of violations."""
        problems: List[str] = []
        utxos: Dict[Outpoint, Tuple[TxOutput, int]] = {}
        for block in self.blocks:
            for tx in block.mints:
                for idx, out in enumerate(tx.outputs):
                    utxos[(tx.txid, idx)] = (out, block.height)
            claimed = 0
            for tx in block.txs:
                total_in = 0
                for i, txin in enumerate(tx.inputs):
                    if txin.outpoint not in utxos:
                        problems.append(f"block {block.height}: missing or double-spent input")
                        continue
                    out, h = utxos.pop(txin.outpoint)
                    total_in += out.amount
                    lock = txmodel.decode_relative_lock(tx.version, txin.sequence)
                    if lock is not None and block.height - h < lock:
                        problems.append(f"block {block.height}: relative lock violated")
                claimed += total_in - tx.output_total()
                for idx, out in enumerate(tx.outputs):
                    utxos[(tx.txid, idx)] = (out, block.height)
            if claimed != block.fees:
                problems.append(f"block {block.height}: fee conservation {claimed} != {block.fees}")
        live = {op: (e.output, e.height) for op, e in self.utxos.items()}
        if live != utxos:
            problems.append("replayed UTXO set differs from incremental state")
        return problems
