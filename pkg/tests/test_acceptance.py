"""Acceptance gate: ten checks, one printed verdict line each.

Every check prints ``C<n> PASS|FAIL: <measurements>`` straight to the
terminal (``capfd.disabled`` bypasses pytest's capture), then asserts.  The
stated time budget is part of each check.  The full-scale companion to C7
is informational only; enable it with FAIRSWARM_FULL_SCALE=1.
"""

import dataclasses
import os
import random
import time
from statistics import fmean, median

from fairswarm import crypto
from fairswarm.experiments import DEFAULT_SEEDS, preset, run_experiment
from fairswarm.metrics import (
    ROLE_LEECHER, freeloader_completion, records_from_log,
)
from fairswarm.protocol import (
    DATA, EXC, L2L, L2S, SECURE, inject_abort, run_to_completion,
    start_session,
)
from fairswarm.swarm import ScenarioConfig, build_network, run_until


def _verdict(capfd, tag, ok, detail):
    with capfd.disabled():
        print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, f"{tag}: {detail}"


def _info(capfd, tag, detail):
    with capfd.disabled():
        print(f"\n{tag} INFO: {detail}", flush=True)


def _l2l(seed=0):
    return start_session(L2L, ("a", "b"), {"b": {"p1"}, "a": {"p2"}},
                         random.Random(seed), session_id="acc", piece_size=64)


def _l2s(seed=0):
    wants = {"x": {"p1", "p2", "p3"}, "y": {"p1", "p2", "p4"}}
    return start_session(L2S, ("s", "x", "y"), wants, random.Random(seed),
                         session_id="acc", piece_size=64)


def _secure(seed=0):
    return start_session(SECURE, ("a", "b"), {"b": {"p1"}, "a": {"p2"}},
                         random.Random(seed), session_id="acc", piece_size=64)


def _finished_rounds(cfg, seed):
    return run_until(build_network(dataclasses.replace(cfg, seed=seed)))


# ---------------------------------------------------------------------------
# C1: honest transcript lengths
# ---------------------------------------------------------------------------

def test_c1_transcript_message_counts(capfd):
    t0 = time.perf_counter()
    counts = {L2L: len(run_to_completion(_l2l()).transcript),
              L2S: len(run_to_completion(_l2s()).transcript),
              SECURE: len(run_to_completion(_secure()).transcript)}
    dt = time.perf_counter() - t0
    ok = counts == {L2L: 6, L2S: 10, SECURE: 7} and dt < 1.0
    _verdict(capfd, "C1", ok, f"honest transcripts L2L={counts[L2L]} "
                       f"L2S={counts[L2S]} SECURE={counts[SECURE]} "
                       f"({dt:.2f}s / 1s)")


# ---------------------------------------------------------------------------
# C2: no decryption without a prior upload, at every abort point
# ---------------------------------------------------------------------------

def _first_index(transcript, **attrs):
    for i, msg in enumerate(transcript):
        if all(getattr(msg, k) == v for k, v in attrs.items()):
            return i
    return None


def test_c2_abort_sweep_never_rewards_silence(capfd):
    t0 = time.perf_counter()
    checked = violations = 0
    for factory in (_l2l, _l2s):
        template = factory()
        labels = [entry.label for entry in template.script]
        parties = list(template.ledger.parties)
        for label in labels:
            for quitter in parties:
                sess = inject_abort(factory(), quitter, label)
                checked += 1
                for who, entry in sess.ledger.parties.items():
                    if entry.bytes_decryptable <= 0:
                        continue
                    sent = _first_index(sess.transcript, kind=DATA, sender=who)
                    keyed = _first_index(sess.transcript, kind=EXC,
                                         receiver=who)
                    if sent is None or (keyed is not None and sent > keyed):
                        violations += 1
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 1.0
    _verdict(capfd, "C2", ok, f"{checked} abort runs, {violations} decrypt-without-"
                       f"upload violations ({dt:.2f}s / 1s)")


# ---------------------------------------------------------------------------
# C3: the seeder uploads each piece once; duplicates ride on leechers
# ---------------------------------------------------------------------------

def test_c3_seeder_uploads_each_piece_exactly_once(capfd):
    t0 = time.perf_counter()
    rng = random.Random(99)
    bad = 0
    n_runs = 1000
    for i in range(n_runs):
        universe = [f"p{j}" for j in range(rng.randint(4, 12))]
        shared = rng.sample(universe, rng.randint(2, min(4, len(universe))))
        wants = {"x": set(shared) | {f"ex{i}"}, "y": set(shared) | {f"ey{i}"}}
        sess = run_to_completion(
            start_session(L2S, ("s", "x", "y"), wants, random.Random(i),
                          session_id=f"r{i}", piece_size=32))
        from_seeder = [p for m in sess.transcript
                       if m.kind == DATA and m.sender == "s"
                       for p in m.piece_refs]
        from_leechers = [p for m in sess.transcript
                         if m.kind == DATA and m.sender != "s"
                         for p in m.piece_refs]
        if len(from_seeder) != len(set(from_seeder)):
            bad += 1
        elif sorted(from_leechers) != sorted(from_seeder):
            bad += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 5.0
    _verdict(capfd, "C3", ok, f"{n_runs} randomized 3-party sessions, {bad} with a "
                       f"duplicate seeder upload or a missing leecher relay "
                       f"({dt:.2f}s / 5s)")


# ---------------------------------------------------------------------------
# C4: wire observer of the hardened variant decrypts nothing
# ---------------------------------------------------------------------------

def test_c4_eavesdropper_decrypts_zero_envelopes(capfd):
    t0 = time.perf_counter()
    recovered = attempts = 0
    for i in range(100):
        sess = run_to_completion(_secure(seed=i))
        keys = [m.key_material for m in sess.transcript
                if m.key_material is not None]
        envelopes = [m.envelope for m in sess.transcript
                     if m.envelope is not None]
        trials = list(keys)
        trials += [crypto.KeyMaterial(e.key_id, crypto.KIND_DEC, e.payload)
                   for e in envelopes]
        for env in envelopes:
            for key in trials:
                attempts += 1
                try:
                    crypto.decrypt(env, key)
                    recovered += 1
                except crypto.CryptoError:
                    pass
    dt = time.perf_counter() - t0
    ok = recovered == 0 and dt < 10.0
    _verdict(capfd, "C4", ok, f"100 runs, {attempts} decrypt attempts, {recovered} "
                       f"plaintext recoveries ({dt:.2f}s / 10s)")


# ---------------------------------------------------------------------------
# C5: escrowed trading finishes the swarm sooner than willingness 0.5
# ---------------------------------------------------------------------------

def test_c5_completion_beats_willingness_half(capfd):
    t0 = time.perf_counter()
    arms = preset("fig4", scale="desk").configs
    wins, rows = 0, []
    for seed in DEFAULT_SEEDS:
        rp = _finished_rounds(arms["proposed"], seed).round_no
        rw = _finished_rounds(arms["willingness50"], seed).round_no
        wins += rp < rw
        rows.append(f"{rp}<{rw}" if rp < rw else f"{rp}>={rw}")
    dt = time.perf_counter() - t0
    ok = wins >= 9 and dt < 60.0
    _verdict(capfd, "C5", ok, f"proposed finished first in {wins}/10 paired seeds "
                       f"[{', '.join(rows)}] ({dt:.1f}s / 60s)")


# ---------------------------------------------------------------------------
# C6: minimum final upload variance across the willingness sweep
# ---------------------------------------------------------------------------

def test_c6_upload_variance_is_lowest(capfd):
    t0 = time.perf_counter()
    arms = preset("fig5b").configs
    wins = 0
    details = []
    for seed in DEFAULT_SEEDS:
        final = {arm: _finished_rounds(cfg, seed).records[-1].upload_variance
                 for arm, cfg in arms.items()}
        others = min(v for arm, v in final.items() if arm != "proposed")
        wins += final["proposed"] < others
        details.append(f"{final['proposed']:.0f}|{others:.0f}")
    dt = time.perf_counter() - t0
    ok = wins >= 8 and dt < 300.0
    _verdict(capfd, "C6", ok, f"proposed variance lowest in {wins}/10 seeds "
                       f"(prop|best-other: {', '.join(details)}) "
                       f"({dt:.1f}s / 300s)")


# ---------------------------------------------------------------------------
# C7: freeloaders wait at least twice as long under escrowed trading
# ---------------------------------------------------------------------------

def _freeloader_rounds(cfg, seed):
    state = _finished_rounds(cfg, seed)
    # A freeloader still incomplete at the cap is censored at the last
    # round, which can only understate the delay ratio.
    return [r if r is not None else state.round_no
            for r in freeloader_completion(state).values()]


def test_c7_freeloader_delay_ratio(capfd):
    t0 = time.perf_counter()
    arms = preset("fig6", scale="desk").configs
    pooled = {"proposed": [], "willingness50": []}
    for seed in DEFAULT_SEEDS:
        for arm in pooled:
            pooled[arm] += _freeloader_rounds(arms[arm], seed)
    med_prop = median(pooled["proposed"])
    med_will = median(pooled["willingness50"])
    ratio = med_prop / med_will
    dt = time.perf_counter() - t0
    ok = ratio >= 2.0 and dt < 120.0
    _verdict(capfd, "C7", ok, f"median freeloader completion {med_prop:.0f} vs "
                       f"{med_will:.0f} rounds, ratio {ratio:.2f} (>= 2.0) "
                       f"({dt:.1f}s / 120s)")
    if os.environ.get("FAIRSWARM_FULL_SCALE") == "1":
        full = preset("fig6").configs
        fp, fw = [], []
        for seed in (1, 2, 3):
            fp += _freeloader_rounds(full["proposed"], seed)
            fw += _freeloader_rounds(full["willingness50"], seed)
        r_full = median(fp) / median(fw)
        _info(capfd, "C7-full", f"500-node ratio {r_full:.2f}; 3x target "
                         f"{'met' if r_full >= 3.0 else 'not met'} "
                         f"(non-blocking)")
    else:
        _info(capfd, "C7-full", "500-node companion skipped; set "
                         "FAIRSWARM_FULL_SCALE=1 to run it (non-blocking)")


# ---------------------------------------------------------------------------
# C8: leechers shoulder more of the upload load than under tit-for-tat
# ---------------------------------------------------------------------------

def test_c8_leechers_carry_more_seeders_less_than_tft(capfd):
    t0 = time.perf_counter()
    arms = preset("fig7b").configs
    wins = 0
    for seed in DEFAULT_SEEDS:
        means = {}
        for arm in ("proposed", "tft"):
            state = _finished_rounds(arms[arm], seed)
            means[arm] = (
                fmean(p.uploads for p in state.peers.values()
                      if p.role == ROLE_LEECHER),
                state.records[-1].seeder_upload_mean)
        leech_up = means["proposed"][0] > means["tft"][0]
        seed_down = means["proposed"][1] < means["tft"][1]
        wins += leech_up and seed_down
    dt = time.perf_counter() - t0
    ok = wins >= 8 and dt < 120.0
    _verdict(capfd, "C8", ok, f"leechers up and seeders down vs tit-for-tat in "
                       f"{wins}/10 seeds ({dt:.1f}s / 120s)")


# ---------------------------------------------------------------------------
# C9: identical seeds give byte-identical output files
# ---------------------------------------------------------------------------

def test_c9_reruns_are_byte_identical(capfd, tmp_path):
    t0 = time.perf_counter()
    first = run_experiment("fig6", seeds=(1, 2), out_dir=tmp_path / "a",
                           scale="desk")
    second = run_experiment("fig6", seeds=(1, 2), out_dir=tmp_path / "b",
                            scale="desk")
    same = all(fa.name == fb.name and fa.read_bytes() == fb.read_bytes()
               for fa, fb in zip(first, second))
    dt = time.perf_counter() - t0
    ok = same and len(first) == len(second) and dt < 60.0
    _verdict(capfd, "C9", ok, f"{len(first)} files byte-identical across reruns: "
                       f"{same} ({dt:.1f}s / 60s)")


# ---------------------------------------------------------------------------
# C10: streamed metrics equal recomputation from the transfer log
# ---------------------------------------------------------------------------

def test_c10_metrics_replay_matches_streamed(capfd):
    t0 = time.perf_counter()
    cfg = ScenarioConfig(n_nodes=20, n_seeders=2, n_freeloaders=1,
                         n_pieces=8, seed=13)
    state = run_until(build_network(cfg))
    replayed = records_from_log(state)
    dt = time.perf_counter() - t0
    ok = replayed == state.records and dt < 30.0
    _verdict(capfd, "C10", ok, f"{len(state.records)} per-round records equal on "
                        f"replay ({dt:.2f}s / 30s)")
