"""Command-line scenario runner and report emitter.

Subcommands:
  covenant run       covenant session, boundary search, fee strategies, PoR
  ajolote simulate   scripted Ajolote world from a scenario JSON file
  risk eval          attack-tree evaluation from the DSL
  observe scan       observer scan over a synthetic corpus

Exit codes: 0 every assertion passed, 1 an assertion failed, 2 the input
could not be parsed.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from . import ajolote as aj
from . import analysis, covenant, crypto
from .chainsim import ChainConfig

EXIT_PASS, EXIT_FAIL, EXIT_PARSE = 0, 1, 2
SEED_MAX = 2**64


class ScenarioError(Exception):
    """The scenario file is malformed."""


def plain(x: Any) -> Any:
    """JSON-ready copy: bytes become hex, tuples become lists."""
    if isinstance(x, bytes):
        return x.hex()
    if isinstance(x, crypto.GroupPoint):
        return x.hex()
    if isinstance(x, dict):
        return {str(plain(k)) if not isinstance(k, str) else k: plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [plain(v) for v in x]
    if isinstance(x, (set, frozenset)):
        return sorted(plain(v) for v in x)
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if hasattr(x, "value") and isinstance(getattr(x, "value"), str):
        return x.value
    return x


def dumps(report: dict) -> str:
    return json.dumps(plain(report), sort_keys=True, indent=2) + "\n"


# scenarios

EVENTS: Dict[str, Tuple[str, ...]] = {
    # event -> required keys
    "setup": (),
    "receive": ("amount",),
    "deposit": ("amounts",),
    "withdraw": ("vault",),
    "spend": ("vault",),
    "advance": ("blocks",),
    "attack_withdraw": ("vault",),
    "steal": ("vault",),
    "reject": ("vault",),
    "fee_spike": ("level", "duration"),
    "ceremony": ("kind",),
}

ASSERTIONS: Dict[str, Tuple[str, ...]] = {
    "ceremonies_ok": (),
    "timeline": ("expected",),
    "final_counts": ("expected",),
    "max_unlocked_fraction": ("max",),
    "no_alerts": (),
    "no_rejects": (),
    "hashes_consistent": (),
    "rejected_within_lock": ("vault",),
    "funds_at_fallback": ("vault",),
    "no_theft": (),
    "vault_status": ("vault", "status"),
}


@dataclass
class Scenario:
    name: str
    seed: int
    config: aj.Config
    chain: ChainConfig
    compromised: Tuple[str, ...]
    script: List[dict]
    assertions: List[dict]


def bundled_scenarios() -> List[str]:
    root = importlib.resources.files("covault") / "data" / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _read_scenario_text(path: str) -> str:
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    name = os.path.basename(path)
    name = name[:-5] if name.endswith(".json") else name
    if name in bundled_scenarios():
        return (importlib.resources.files("covault") / "data" / "scenarios" / f"{name}.json").read_text("utf-8")
    raise ScenarioError(f"no such scenario: {path}")


def parse_scenario(text: str) -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a JSON object")
    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < SEED_MAX:
        raise ScenarioError("seed is mandatory and must be a 64-bit unsigned integer")
    try:
        config = aj.Config.from_dict(raw.get("config", {}))
        chain = ChainConfig(**raw.get("chain", {}))
    except (TypeError, ValueError, KeyError, AttributeError, aj.AjoloteError) as exc:
        raise ScenarioError(f"bad config: {exc}") from exc
    compromised = raw.get("compromised", [])
    if not isinstance(compromised, list) or not all(isinstance(c, str) for c in compromised):
        raise ScenarioError("compromised must be a list of device names")
    script = raw.get("script")
    if not isinstance(script, list):
        raise ScenarioError("script must be a list of events")
    for i, ev in enumerate(script):
        if not isinstance(ev, dict) or ev.get("do") not in EVENTS:
            raise ScenarioError(f"event {i}: unknown or missing 'do'")
        missing = [k for k in EVENTS[ev["do"]] if k not in ev]
        if missing:
            raise ScenarioError(f"event {i} ({ev['do']}): missing {missing}")
    assertions = raw.get("assertions", [])
    if not isinstance(assertions, list):
        raise ScenarioError("assertions must be a list")
    for i, a in enumerate(assertions):
        if not isinstance(a, dict) or a.get("kind") not in ASSERTIONS or not isinstance(a.get("name"), str):
            raise ScenarioError(f"assertion {i}: needs a name and a known kind")
        missing = [k for k in ASSERTIONS[a["kind"]] if k not in a]
        if missing:
            raise ScenarioError(f"assertion {a['name']}: missing {missing}")
    return Scenario(str(raw.get("name", "scenario")), seed, config, chain, tuple(compromised), script, assertions)


def load_scenario(path: str) -> Scenario:
    return parse_scenario(_read_scenario_text(path))


# runner


@dataclass
class Theft:
    vault: int
    wit_txid: bytes
    wit_height: Optional[int] = None
    feerate: int = 200
    armed: bool = False
    spend_txids: List[str] = field(default_factory=list)


class Runner:
    """Executes a scenario script against one seeded world."""

    def __init__(self, sc: Scenario, seed: int):
        self.sc = sc
        self.seed = seed
        self.world = aj.World.create(sc.config, seed, sc.chain, aj.Adversary(frozenset(sc.compromised)))
        self.vaults: List[int] = []
        self.events: List[dict] = []
        self.timeline: List[Tuple[int, int, int]] = []
        self.exposure: List[Tuple[int, float]] = []
        self.thefts: Dict[int, Theft] = {}

    # helpers

    def _record(self, *, ceremony: Optional[aj.CeremonyResult] = None):
        counts = self.world.output_counts()
        if not self.timeline or self.timeline[-1] != counts:
            self.timeline.append(counts)
        self.exposure.append((self.world.chain.height, aj.value_at_risk(self.world)["unlocked_fraction"]))

    def _vault(self, ev: dict) -> int:
        idx = int(ev["vault"])
        if not 0 <= idx < len(self.vaults):
            raise ScenarioError(f"vault index {idx} out of range")
        return self.vaults[idx]

    def _ceremony(self, kind: str, **params) -> dict:
        res = aj.run_ceremony(self.world, kind, **params)
        out = {"ceremony": kind, "ok": res.ok}
        if res.abort is not None:
            out["abort"] = {"step": res.abort.step, "reason": res.abort.reason, "party": res.abort.party}
        if "vaults" in res.data:
            self.vaults += list(res.data["vaults"])
            out["vaults"] = list(res.data["vaults"])
        return out

    def _theft_tick(self):
        """Armed thieves try to spend once the relative lock allows."""
        chain = self.world.chain
        T = self.world.config.T
        for theft in self.thefts.values():
            if not theft.armed or theft.wit_height is None:
                continue
            rec = self.world.mobile.vaults[theft.vault]
            if chain.spender(rec.unvault_outpoint) is not None:
                continue
            if any(chain.in_mempool(bytes.fromhex(t)) for t in theft.spend_txids):
                continue
            if chain.height + 1 - theft.wit_height < T:
                continue
            tx, res = aj.steal(self.world, theft.vault, crypto.keypair_from_label(f"thief/{self.seed}").pub.data,
                               theft.feerate)
            if res:
                theft.spend_txids.append(tx.txid.hex())

    def _advance(self, blocks: int) -> dict:
        acts = []
        for _ in range(blocks):
            self._theft_tick()
            acts += self.world.advance(1)
            for theft in self.thefts.values():
                if theft.wit_height is None:
                    theft.wit_height = self.world.chain.tx_height.get(theft.wit_txid)
            self._record()
        return {"watchtower_actions": [a for a in acts if a.get("action") != "none"]}

    # events

    def step(self, ev: dict) -> dict:
        do = ev["do"]
        w = self.world
        if do == "setup":
            res = aj.setup_world(w)
            return {"ok": all(r.ok for r in res), "ceremonies": [r.kind for r in res]}
        if do == "receive":
            return self._ceremony("receive", amount=int(ev["amount"]))
        if do == "deposit":
            return self._ceremony("vault_deposit", amounts=[int(a) for a in ev["amounts"]])
        if do == "withdraw":
            return self._ceremony("withdraw", v=self._vault(ev), signers=tuple(ev.get("signers", ("mobile", "home"))))
        if do == "spend":
            params = {"v": self._vault(ev), "signers": tuple(ev.get("signers", ("mobile", "home")))}
            if "amount" in ev:
                params["amount"] = int(ev["amount"])
            return self._ceremony("spend", **params)
        if do == "advance":
            return self._advance(int(ev["blocks"]))
        if do == "attack_withdraw":
            v = self._vault(ev)
            thieves = [d for d in aj.ACTIVE if w.devices[d].compromised][:2]
            if len(thieves) < 2:
                return {"ok": False, "reason": "two active signer keys required"}
            tx = aj.finalize_withdrawal(w, w.mobile.vaults[v], thieves)
            res = w.broadcast(tx, f"attack-wit:{v}")
            self.thefts[v] = Theft(v, tx.txid)
            return {"ok": bool(res), "txid": tx.txid.hex()}
        if do == "steal":
            v = self._vault(ev)
            theft = self.thefts.get(v)
            if theft is None:
                raise ScenarioError("steal needs a prior attack_withdraw of the same vault")
            theft.armed = True
            theft.feerate = int(ev.get("feerate", 200))
            return {"ok": True}
        if do == "reject":
            return self._ceremony("reject", v=self._vault(ev), k=int(ev.get("k", 1)))
        if do == "fee_spike":
            budget = ev.get("budget")
            w.chain.fee_spike(int(ev["level"]), int(ev["duration"]), None if budget is None else int(budget))
            return {"ok": True}
        if do == "ceremony":
            return self._ceremony(ev["kind"], **ev.get("params", {}))
        raise ScenarioError(f"unknown event {do}")

    def run(self) -> None:
        self._record()
        for i, ev in enumerate(self.sc.script):
            detail = self.step(ev)
            if ev["do"] != "advance":
                self._record()
            self.events.append({"index": i, "do": ev["do"], "height": self.world.chain.height, **detail})

    # state views

    def vault_status(self, v: int) -> str:
        chain = self.world.chain
        rec = self.world.mobile.vaults.get(v) or self.world.devices["home"].vaults.get(v)
        if rec is None:
            return "unknown"
        spender = chain.spender(rec.vault_outpoint)
        if spender is None:
            return "vaulted"
        if spender != rec.tx_wit.txid:
            return "swept"
        nxt = chain.spender(rec.unvault_outpoint)
        if nxt is None:
            return "unvaulting"
        if nxt == rec.tx_fb.txid:
            return "fallback"
        if any(t.vault == v and nxt.hex() in t.spend_txids for t in self.thefts.values()):
            return "stolen"
        return "spent"

    def covenants(self) -> List[dict]:
        out = []
        for k, v in enumerate(self.vaults):
            rec = self.world.mobile.vaults[v]
            out.append({"vault": k, "v": v, "amount": rec.amount, "status": self.vault_status(v),
                        "vault_outpoint": f"{rec.vault_outpoint[0].hex()}:{rec.vault_outpoint[1]}",
                        "tx_wit": rec.tx_wit.txid.hex(), "tx_fb": rec.tx_fb.txid.hex()})
        return out

    def hashes(self) -> Dict[str, dict]:
        out = {}
        names = [d for d in aj.SIGNERS if not self.world.devices[d].decommissioned]
        names += [wt.name for wt in self.world.watchtowers.values()]
        for d in names:
            hs, ho = aj.system_hashes(self.world, d)
            out[d] = {"H_setup": hs.hex() if hs else None, "H_operation": ho.hex()}
        return out

    # assertions

    def check(self, a: dict) -> Tuple[bool, Any]:
        kind = a["kind"]
        w = self.world
        chain = w.chain
        if kind == "ceremonies_ok":
            bad = [c.kind for c in w.ceremonies if not c.ok]
            return not bad, {"failed": bad}
        if kind == "timeline":
            got = [list(t) for t in self.timeline]
            return got == [list(t) for t in a["expected"]], {"timeline": got}
        if kind == "final_counts":
            got = list(w.output_counts())
            return got == list(a["expected"]), {"counts": got}
        if kind == "max_unlocked_fraction":
            got = max((f for _, f in self.exposure), default=0.0)
            return got <= float(a["max"]), {"max_unlocked_fraction": got}
        if kind == "no_alerts":
            alerts = [x for wt in w.watchtowers.values() for x in wt.alerts]
            return not alerts, {"alerts": len(alerts)}
        if kind == "no_rejects":
            rejects = [x for x in w.actions if x.get("action") == "broadcast" and "watchtower" in x]
            return not rejects, {"rejects": len(rejects)}
        if kind == "hashes_consistent":
            hs = self.hashes()
            setups = {v["H_setup"] for v in hs.values() if v["H_setup"] is not None}
            ops = {v["H_operation"] for d, v in hs.items() if d in ("mobile", "home") or d.startswith("wt")}
            return len(setups) == 1 and len(ops) == 1, {"distinct_H_setup": len(setups),
                                                         "distinct_H_operation": len(ops)}
        if kind in ("rejected_within_lock", "funds_at_fallback"):
            v = self._vault(a)
            rec = w.mobile.vaults[v]
            fb_h = chain.tx_height.get(rec.tx_fb.txid)
            wit_h = chain.tx_height.get(rec.tx_wit.txid)
            if kind == "rejected_within_lock":
                ok = fb_h is not None and wit_h is not None and fb_h < wit_h + w.config.T
                return ok, {"wit_height": wit_h, "fb_height": fb_h, "T": w.config.T}
            fb_out = (rec.tx_fb.txid, 0)
            ok = fb_h is not None and chain.output(fb_out) is not None
            return ok, {"fb_height": fb_h, "fallback_amount": chain.output(fb_out).amount if ok else 0}
        if kind == "no_theft":
            stolen = [t for th in self.thefts.values() for t in th.spend_txids if chain.is_confirmed(bytes.fromhex(t))]
            attempts = sum(len(th.spend_txids) for th in self.thefts.values())
            return not stolen, {"confirmed_thefts": stolen, "attempts": attempts}
        if kind == "vault_status":
            got = self.vault_status(self._vault(a))
            return got == a["status"], {"status": got}
        raise ScenarioError(f"unknown assertion {kind}")


def render_figures(runner: Runner, stem: str) -> List[str]:
    """Exposure and output-count plots next to the report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    fig, ax = plt.subplots(figsize=(6, 3))
    hs = [h for h, _ in runner.exposure]
    ax.step(hs, [f for _, f in runner.exposure], where="post")
    ax.set_xlabel("block height")
    ax.set_ylabel("unlocked fraction")
    ax.set_title(f"{runner.sc.name}: unlocked exposure")
    fig.tight_layout()
    path = f"{stem}-exposure.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    files.append(os.path.basename(path))

    fig, ax = plt.subplots(figsize=(6, 3))
    steps = list(range(len(runner.timeline)))
    for k, label in enumerate(("N_r", "N_v", "N_u")):
        ax.step(steps, [t[k] for t in runner.timeline], where="post", label=label)
    ax.set_xlabel("state change")
    ax.set_ylabel("unspent outputs")
    ax.legend()
    fig.tight_layout()
    path = f"{stem}-outputs.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    files.append(os.path.basename(path))
    return files


def simulate(sc: Scenario, seed: Optional[int] = None) -> Tuple[dict, Runner]:
    seed = sc.seed if seed is None else seed
    runner = Runner(sc, seed)
    runner.run()
    detections, graph = analysis.observer_scan(runner.world.chain)
    results = []
    for a in sc.assertions:
        ok, detail = runner.check(a)
        results.append({"name": a["name"], "kind": a["kind"], "pass": bool(ok), "detail": detail})
    w = runner.world
    report = {
        "scenario": sc.name,
        "seed": seed,
        "config": w.config.to_dict(),
        "compromised": list(sc.compromised),
        "events": runner.events,
        "ceremonies": [{"kind": c.kind, "ok": c.ok,
                        "abort": None if c.abort is None else
                        {"step": c.abort.step, "reason": c.abort.reason, "party": c.abort.party}}
                       for c in w.ceremonies],
        "actions": w.actions,
        "chain_log": w.chain.log.records,
        "timeline": [list(t) for t in runner.timeline],
        "value_at_risk": aj.value_at_risk(w),
        "hashes": runner.hashes(),
        "covenants": runner.covenants(),
        "detections": [d.to_dict() for d in detections],
        "correlation_edges": {k: len(graph.edges_of(k)) for k in analysis.EDGE_KINDS},
        "assertions": results,
        "passed": all(r["pass"] for r in results),
    }
    return report, runner


def run_scenario(path: str, seed: Optional[int] = None, out: Optional[str] = None,
                 figures: bool = True) -> Tuple[int, Optional[dict]]:
    """Parse, execute and report one scenario; returns (exit code, report)."""
    try:
        sc = load_scenario(path)
        report, runner = simulate(sc, seed)
    except ScenarioError as exc:
        return EXIT_PARSE, {"error": str(exc)}
    if out:
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        if figures:
            report["figures"] = render_figures(runner, os.path.splitext(out)[0])
        _write(out, dumps(report))
    return (EXIT_PASS if report["passed"] else EXIT_FAIL), report


# other subcommands


def _write(path: str, text: str) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _assertion(name: str, ok: bool, detail: Any = None) -> dict:
    return {"name": name, "pass": bool(ok), "detail": detail}


def covenant_report(options: dict, seed: int) -> dict:
    n, m = int(options.get("n", 2)), int(options.get("m", 2))
    k, j = int(options.get("k", 3)), int(options.get("j", 2))
    amount = int(options.get("amount", 1_000_000))
    spec, actors, chain, custodians = covenant.demo_session(n, m, k, j, seed, amount)
    res = covenant.run_session(spec, actors, covenant.default_channels(actors), chain, seed=seed,
                               confirm_blocks=chain.config.deep_confirmations)
    checks = [_assertion("session_completes", res.ok, None if res.abort is None else str(res.abort))]
    report: Dict[str, Any] = {"params": {"n": n, "m": m, "k": k, "j": j, "amount": amount}, "seed": seed,
                              "session": json.loads(res.to_json())}
    if res.ok:
        cov = res.covenant
        status = covenant.check_enforcement(cov, chain)
        report["status"] = str(status)
        checks.append(_assertion("status_active", status.kind is covenant.StatusKind.ACTIVE, str(status)))
        tx = covenant.finalize(cov, covenant.key_oracle(cov, cov.tx_cov, custodians))
        fin = chain.submit(tx)
        checks.append(_assertion("finalized_tx_accepted", bool(fin), getattr(fin, "reason", None)))
        spec2, actors2, chain2, cust2 = covenant.demo_session(n, m, k, j, seed, amount)
        cov2 = covenant.run_session(spec2, actors2, covenant.default_channels(actors2), chain2, seed=seed).covenant
        por = covenant.proof_of_reserves(cov2, cust2)
        checks.append(_assertion("por_verifies", covenant.verify_por(por)))
        try:
            covenant.finalize_with_por(cov2, por)
            por_final = False
        except covenant.Unsatisfiable:
            por_final = True
        checks.append(_assertion("por_cannot_finalize", por_final))
        demo = chain2.submit(por.demo_tx)
        checks.append(_assertion("por_demo_rejected", not demo, getattr(demo, "reason", None)))
    boundary = covenant.coalition_search(n, m, k, j, seed)
    report["boundary"] = boundary.to_dict()
    checks.append(_assertion("boundary", boundary.ok))
    if options.get("fee_strategies", True):
        matrix = covenant.fee_strategy_matrix(seed)
        report["fee_strategies"] = matrix
        agree = all(r["broadcast"] and r["pinned"] == r["table_pinnable"] and r["malleable"] == r["table_malleable"]
                    for r in matrix.values())
        checks.append(_assertion("fee_table", agree))
        cp = covenant.cpfp_chain_under_spike(seed)
        report["cpfp_chain"] = cp.to_dict()
        checks.append(_assertion("cpfp_advances_chain", cp.advanced))
    report["assertions"] = checks
    report["passed"] = all(c["pass"] for c in checks)
    return report


def _parse_params(items: Sequence[str]) -> Dict[str, int]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or not key.strip():
            raise ScenarioError(f"parameter must look like NAME=INT: {item}")
        try:
            out[key.strip()] = int(val)
        except ValueError as exc:
            raise ScenarioError(f"parameter {key} is not an integer") from exc
    return out


def _load_attributes(path: str) -> Dict[str, analysis.Attributes]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ScenarioError("attributes file must map leaf ids or labels to attribute objects")
    out = {}
    for key, v in raw.items():
        try:
            out[key] = analysis.Attributes(float(v["cost"]), float(v["time"]), float(v["prob"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad attributes for {key}") from exc
    return out


def risk_report(tree: str, params: Dict[str, int], seed: int, attributes: Optional[str] = None,
                budget: Optional[float] = None, tree_id: Optional[str] = None, check_oracle: bool = False) -> dict:
    library = analysis.load_revault_library()
    if os.path.exists(tree):
        with open(tree, encoding="utf-8") as fh:
            extra = analysis.parse_trees(fh.read())
        library = {**library, **extra}
        tid = tree_id or next(iter(extra))
    elif tree in library:
        tid = tree
    else:
        raise ScenarioError(f"no such tree file or library id: {tree}")
    node = analysis.instantiate(library, tid, params)
    attrs = _load_attributes(attributes) if attributes else analysis.random_attributes(node, seed)
    node = analysis.attach_attributes(node, attrs)
    first = analysis.eval_tree(node, "min_cost")
    b = budget if budget is not None else (1.5 * first.value if math.isfinite(first.value) else math.inf)
    results = {q: analysis.eval_tree(node, q, b).to_dict() for q in analysis.QUERIES}
    checks = []
    if check_oracle:
        for q in analysis.QUERIES:
            want = analysis.oracle_eval(node, q, b)
            got = results[q]["value"]
            ok = (got is None and not math.isfinite(want)) or (
                got is not None and math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-12))
            checks.append(_assertion(f"oracle_{q}", ok, {"engine": got, "oracle": plain(float(want))}))
    return {"tree": tid, "params": params, "seed": seed, "budget": b if math.isfinite(b) else None,
            "leaves": len(analysis.leaves(node)), "attributes": "file" if attributes else "seeded",
            "independence_assumption": True, "results": results, "assertions": checks,
            "passed": all(c["pass"] for c in checks)}


def observe_report(seed: int, sequences: int, noise: int, reject_every: int) -> dict:
    corpus = analysis.build_observer_corpus(seed, sequences, noise, reject_every)
    detections, graph = analysis.observer_scan(corpus.chain)
    score = analysis.score_detections(detections, corpus)
    enf_edges = {(a, b) for a, b, _ in graph.edges_of("enforcement-key-reuse")}
    rejects = [d for d in detections if d.kind == "reject"]
    marked = sum(1 for d in rejects if tuple(sorted(d.outputs)) in enf_edges)
    checks = [_assertion("recall", score["recall"] == 1.0, score["recall"]),
              _assertion("precision", score["precision"] == 1.0, score["precision"]),
              _assertion("reject_enforcement_edges", marked == len(rejects), {"rejects": len(rejects),
                                                                                "with_edge": marked})]
    return {"seed": seed, "score": score, "correlation_edges": {k: len(graph.edges_of(k))
                                                                 for k in analysis.EDGE_KINDS},
            "clusters": len(set(graph.clusters.values())), "detections": [d.to_dict() for d in detections],
            "assertions": checks, "passed": all(c["pass"] for c in checks)}


# entry point


def _emit(report: dict, out: Optional[str], fmt: str) -> None:
    if fmt == "json":
        text = dumps(report)
    else:
        lines = [f"{'PASS' if a['pass'] else 'FAIL'} {a['name']}" for a in report.get("assertions", [])]
        lines.append("passed" if report.get("passed") else "failed")
        text = "\n".join(lines) + "\n"
    if out:
        if fmt == "json":
            _write(out, text)
        else:
            _write(out, dumps(report))
            sys.stdout.write(text)
    else:
        sys.stdout.write(text)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="covault", description="Deleted-key covenant and vault custody toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the scenario seed)")
    common.add_argument("--out", default=None, help="write the JSON report here")
    common.add_argument("--format", choices=("json", "text"), default="json")
    sub = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    cov = sub.add_parser("covenant").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    run = cov.add_parser("run", parents=[common], help="covenant session and property checks")
    run.add_argument("spec", nargs="?", default=None, help="JSON object with n, m, k, j, amount")
    for name in ("n", "m", "k", "j", "amount"):
        run.add_argument(f"--{name}", type=int, default=None)
    run.add_argument("--no-fee-strategies", action="store_true")

    ajo = sub.add_parser("ajolote").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sim = ajo.add_parser("simulate", parents=[common], help="run a scenario file or bundled scenario")
    sim.add_argument("scenario", nargs="?", default=None)
    sim.add_argument("--list", action="store_true", help="list bundled scenarios")
    sim.add_argument("--no-figures", action="store_true")

    risk = sub.add_parser("risk").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    ev = risk.add_parser("eval", parents=[common], help="evaluate an attack tree")
    ev.add_argument("tree", help="library id (a..k, A..K) or a .tree file")
    ev.add_argument("--tree-id", default=None, help="tree within the file")
    ev.add_argument("--param", action="append", default=[], metavar="NAME=INT")
    ev.add_argument("--attributes", default=None, help="JSON map of leaf id or label to cost/time/prob")
    ev.add_argument("--budget", type=float, default=None)
    ev.add_argument("--check-oracle", action="store_true")

    obs = sub.add_parser("observe").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    scan = obs.add_parser("scan", parents=[common], help="scan a synthetic corpus")
    scan.add_argument("--sequences", type=int, default=50)
    scan.add_argument("--noise", type=int, default=500)
    scan.add_argument("--reject-every", type=int, default=5)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    seed = args.seed
    if seed is not None and not 0 <= seed < SEED_MAX:
        sys.stderr.write("seed must be a 64-bit unsigned integer\n")
        return EXIT_PARSE
    try:
        if args.group == "ajolote":
            if args.list:
                sys.stdout.write("\n".join(bundled_scenarios()) + "\n")
                return EXIT_PASS
            if args.scenario is None:
                raise ScenarioError("a scenario path or bundled name is required")
            code, report = run_scenario(args.scenario, seed, args.out, figures=not args.no_figures)
            if code == EXIT_PARSE:
                sys.stderr.write(f"parse error: {report['error']}\n")
                return code
            if args.out is None or args.format == "text":
                _emit(report, None, args.format)
            return code
        if args.group == "covenant":
            options: Dict[str, Any] = {}
            if args.spec:
                with open(args.spec, encoding="utf-8") as fh:
                    options = json.load(fh)
                if not isinstance(options, dict):
                    raise ScenarioError("covenant spec must be a JSON object")
            for name in ("n", "m", "k", "j", "amount"):
                if getattr(args, name) is not None:
                    options[name] = getattr(args, name)
            if args.no_fee_strategies:
                options["fee_strategies"] = False
            report = covenant_report(options, seed if seed is not None else int(options.get("seed", 0)))
        elif args.group == "risk":
            report = risk_report(args.tree, _parse_params(args.param), seed or 0, args.attributes, args.budget,
                                 args.tree_id, args.check_oracle)
        else:
            report = observe_report(seed or 0, args.sequences, args.noise, args.reject_every)
    except (ScenarioError, analysis.AnalysisError, covenant.CovenantError, json.JSONDecodeError, OSError) as exc:
        sys.stderr.write(f"parse error: {exc}\n")
        return EXIT_PARSE
    _emit(report, args.out, args.format)
    return EXIT_PASS if report["passed"] else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
