import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import literal_greedy_filter, loop_similarity
from world import world_model
from tokenroute import synthetic
from tokenroute.errors import ConfigError, GenerationFailed, StalledBootstrap
from tokenroute.frozen_lm import ModelConfig, Vocabulary, build_model
from tokenroute.registry import parse_document
from tokenroute.self_instruct import (
    SEED,
    BootstrapLog,
    Demonstration,
    DemonstrationSet,
    FilterConfig,
    RemoteGenerator,
    SimilarityScorer,
    TemplateGenerator,
    bootstrap,
    calibrate_band,
    capability_keywords,
    generate_round,
    generated,
    greedy_filter,
    keyword_lists,
    pooled_seed_scores,
    score_distribution,
    seed_set,
    similarity,
)

# Loop oracle output for ("sort numeric column", "reply unread email") on the model below.
DISJOINT_SCORE = 0.41247082005592683


@pytest.fixture(scope="module")
def model():
    vocab = Vocabulary.from_corpus(["sort the numeric column", "reply to unread email", "crop photo"])
    return build_model(ModelConfig(vocab_size=len(vocab), hidden_dim=32, n_heads=4, seed=11), vocab)


@pytest.fixture(scope="module")
def sheet_doc():
    return parse_document(synthetic.document_text(synthetic.DOMAINS[0]))


def D(text, state=""):
    return Demonstration(text, state)


def table_score(table):
    """Score lookup over single-letter demonstrations, symmetric by construction."""
    def score(a, b):
        key = tuple(sorted((a.task_text, b.task_text)))
        return table[key]
    return score


class TestDemonstrationSet:
    def test_empty_task_rejected(self):
        with pytest.raises(ValueError):
            D("  ")

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            DemonstrationSet("A", [D("x"), D("x")])
        s = DemonstrationSet("A", [D("x")])
        assert not s.add(D("x")) and s.add(D("x", "state")) and len(s) == 2

    def test_provenance(self):
        s = DemonstrationSet("A", [D("x")])
        s.add(D("y"), generated(3))
        assert s.provenance == [SEED, "generated:3"]

    def test_jsonl_round_trip(self, tmp_path):
        s = DemonstrationSet("A", [D("x"), D("y", "open")], [SEED, generated(1)])
        s.save(tmp_path / "d.jsonl")
        loaded = DemonstrationSet.load("A", tmp_path / "d.jsonl")
        assert loaded.items == s.items and loaded.provenance == s.provenance
        assert len((tmp_path / "d.jsonl").read_text().splitlines()) == 2


class TestFilterConfig:
    def test_defaults(self):
        cfg = FilterConfig()
        assert (cfg.tau1, cfg.tau2, cfg.target_size, cfg.max_rounds) == (0.8, 0.9, 100, 20)

    @pytest.mark.parametrize("kwargs", [dict(tau1=0.9, tau2=0.8), dict(tau1=0.9, tau2=0.9), dict(tau1=0.0),
                                        dict(tau2=1.2), dict(aggregate="max")])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            FilterConfig(**kwargs)


class TestSimilarity:
    def test_self_is_one(self, model):
        for text in ["sort the numeric column", "crop photo", "email"]:
            assert abs(similarity(D(text), D(text), model) - 1) <= 1e-9

    def test_disjoint_tokens_match_loop_oracle(self, model):
        a, b = "sort numeric column", "reply unread email"
        score = SimilarityScorer(model).score_texts(a, b)
        assert abs(score - loop_similarity(a, b, model)) <= 1e-12
        assert abs(score - DISJOINT_SCORE) <= 1e-12

    def test_empty_rejected(self, model):
        with pytest.raises(ValueError):
            SimilarityScorer(model).score_texts("", "crop photo")

    def test_ignores_state(self, model):
        assert similarity(D("crop photo", "a"), D("crop photo", "b"), model) == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(a=st.lists(st.sampled_from("sort the numeric column reply to unread email crop photo".split()),
                      min_size=1, max_size=6),
           b=st.lists(st.sampled_from("sort the numeric column reply to unread email crop photo".split()),
                      min_size=1, max_size=6))
    def test_symmetric_and_bounded(self, model, a, b):
        scorer = SimilarityScorer(model)
        ab, ba = scorer.score_texts(" ".join(a), " ".join(b)), scorer.score_texts(" ".join(b), " ".join(a))
        assert abs(ab - ba) <= 1e-12 and -1 - 1e-12 <= ab <= 1 + 1e-12


class TestGreedyFilter:
    cfg = FilterConfig(0.8, 0.9)

    def test_empty_candidates(self, model):
        assert greedy_filter([], [D("crop photo")], self.cfg, model) == []

    def test_identical_candidate_rejected(self, model):
        assert greedy_filter([D("crop photo")], [D("crop photo")], self.cfg, model) == []

    def test_priority_order_and_mutual_check(self):
        table = {("a", "x"): 0.85, ("b", "x"): 0.81, ("c", "x"): 0.95,
                 ("a", "b"): 0.95, ("a", "c"): 0.85, ("b", "c"): 0.85}
        out = greedy_filter([D("b"), D("c"), D("a")], [D("x")], self.cfg, table_score(table))
        # a is most central (0.05 from both edges) and accepted first; b then clashes with a; c is out of band.
        assert [d.task_text for d in out] == ["a"]

    def test_ties_keep_input_order(self):
        table = {("a", "x"): 0.85, ("b", "x"): 0.85, ("a", "b"): 0.85}
        out = greedy_filter([D("b"), D("a")], [D("x")], self.cfg, table_score(table))
        assert [d.task_text for d in out] == ["b", "a"]

    def test_existing_pairs_not_checked(self):
        table = {("a", "x"): 0.85, ("a", "y"): 0.85, ("x", "y"): 0.1}
        assert greedy_filter([D("a")], [D("x"), D("y")], self.cfg, table_score(table)) == [D("a")]

    @settings(max_examples=200, deadline=None)
    @given(data=st.data())
    def test_matches_literal_transcription(self, data):
        n_cand = data.draw(st.integers(0, 8))
        n_exist = data.draw(st.integers(0, 8))
        names = [f"c{i}" for i in range(n_cand)] + [f"e{i}" for i in range(n_exist)]
        # Coarse grid so that ties and exact band edges come up.
        grid = st.sampled_from([0.7, 0.75, 0.8, 0.82, 0.85, 0.88, 0.9, 0.95])
        table = {tuple(sorted((a, b))): data.draw(grid) for i, a in enumerate(names) for b in names[i + 1:]}
        score = table_score(table)
        cands = [D(n) for n in names[:n_cand]]
        exist = [D(n) for n in names[n_cand:]]
        out = greedy_filter(cands, exist, self.cfg, score)
        assert out == literal_greedy_filter(cands, exist, 0.8, 0.9, score)
        for i, acc in enumerate(out):
            assert all(0.8 <= score(acc, y) <= 0.9 for y in exist + out[:i])

    def test_mean_aggregate(self):
        cfg = FilterConfig(0.8, 0.9, aggregate="mean")
        table = {("a", "x"): 0.85, ("a", "y"): 0.8, ("b", "x"): 0.83, ("b", "y"): 0.83, ("a", "b"): 0.5}
        out = greedy_filter([D("a"), D("b")], [D("x"), D("y")], cfg, table_score(table))
        # mean distance: a -> 0.025, b -> 0.03, so b goes first and a then clashes with it.
        assert out == [D("b")]


class TestGenerators:
    def test_template_deterministic(self, sheet_doc):
        seeds = seed_set(sheet_doc)
        a = generate_round(seeds, sheet_doc, TemplateGenerator(4), 20)
        b = generate_round(seeds, sheet_doc, TemplateGenerator(4), 20)
        assert a == b and 0 < len(a) <= 20

    def test_n_zero(self, sheet_doc):
        assert generate_round(seed_set(sheet_doc), sheet_doc, TemplateGenerator(), 0) == []

    def test_duplicates_against_set_removed(self, sheet_doc):
        seeds = seed_set(sheet_doc)

        class Echo:
            def generate(self, s, cap, n):
                return [s[0], D("brand new task"), D("brand new task")]

        assert generate_round(seeds, sheet_doc, Echo(), 5) == [D("brand new task")]

    def test_empty_set_rejected(self, sheet_doc):
        with pytest.raises(ValueError):
            generate_round(DemonstrationSet("X"), sheet_doc, TemplateGenerator(), 3)

    def test_failure_carries_round(self, sheet_doc):
        class Broken:
            def generate(self, s, cap, n):
                raise OSError("down")

        with pytest.raises(GenerationFailed) as info:
            generate_round(seed_set(sheet_doc), sheet_doc, Broken(), 3, round_index=7)
        assert info.value.round_index == 7

    def test_keywords(self):
        text = "Sorts, filters and pivots tables using openpyxl."
        assert capability_keywords(text) == ["sorts", "filters", "pivots", "tables", "openpyxl"]
        assert keyword_lists(text) == [["sorts", "filters", "pivots", "tables"], ["openpyxl"]]


class _Handler(BaseHTTPRequestHandler):
    delay = 0.0
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((self.path, body, self.headers.get("Authorization")))
        time.sleep(_Handler.delay)
        if self.path.endswith("/complete"):
            reply = {"text": "Mode: manager"}
        else:
            reply = [{"task_text": f"remote task {i}", "state_text": ""} for i in range(body["n"] + 2)]
            reply[0] = "bare string task"
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture()
def server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    _Handler.delay, _Handler.seen = 0.0, []
    yield f"http://127.0.0.1:{srv.server_address[1]}/gen"
    srv.shutdown()
    srv.server_close()


class TestRemoteGenerator:
    def test_generate(self, server, sheet_doc):
        gen = RemoteGenerator(server, timeout=5, token="secret")
        out = generate_round(seed_set(sheet_doc), sheet_doc, gen, 3)
        assert [d.task_text for d in out] == ["bare string task", "remote task 1", "remote task 2"]
        path, body, auth = _Handler.seen[0]
        assert path == "/gen" and body["n"] == 3 and auth == "Bearer secret"
        assert body["capability_text"] == sheet_doc.capabilities
        assert len(body["seed_examples"]) == len(sheet_doc.demonstrations)

    def test_complete(self, server):
        assert RemoteGenerator(server, timeout=5).complete("which mode?") == "Mode: manager"
        assert _Handler.seen[0][0] == "/gen/complete"

    def test_timeout(self, server, sheet_doc):
        _Handler.delay = 1.0
        with pytest.raises(GenerationFailed) as info:
            generate_round(seed_set(sheet_doc), sheet_doc, RemoteGenerator(server, timeout=0.2), 3, round_index=2)
        assert info.value.round_index == 2

    def test_unreachable(self, sheet_doc):
        with pytest.raises(GenerationFailed):
            generate_round(seed_set(sheet_doc), sheet_doc, RemoteGenerator("http://127.0.0.1:9", timeout=1), 3)


@pytest.fixture(scope="module")
def scorer():
    return SimilarityScorer(world_model())


@pytest.fixture(scope="module")
def band(scorer):
    docs = [parse_document(synthetic.document_text(d)) for d in synthetic.DOMAINS]
    return calibrate_band(pooled_seed_scores([seed_set(d).items for d in docs], scorer))


class TestBootstrap:
    def test_early_exit(self, sheet_doc, model):
        log = BootstrapLog()
        out = bootstrap(sheet_doc, TemplateGenerator(), FilterConfig(target_size=5), model, log)
        assert out.items == seed_set(sheet_doc).items and log.accepted_per_round == []

    def test_reaches_target(self, sheet_doc, scorer, band):
        log = BootstrapLog()
        cfg = FilterConfig(band[0], band[1], target_size=100)
        out = bootstrap(sheet_doc, TemplateGenerator(0), cfg, scorer, log)
        assert len(out) >= 100 and len(log.accepted_per_round) <= 20
        assert out.provenance[: len(sheet_doc.demonstrations)] == [SEED] * len(sheet_doc.demonstrations)

    def test_monotone_and_band_sound(self, sheet_doc, scorer, band):
        log = BootstrapLog()
        cfg = FilterConfig(band[0], band[1], target_size=60)
        out = bootstrap(sheet_doc, TemplateGenerator(1), cfg, scorer, log)
        sizes = np.cumsum([len(sheet_doc.demonstrations)] + log.accepted_per_round)
        assert np.all(np.diff(sizes) >= 0) and sizes[-1] == len(out)
        # Audit: every generated item sits in band against everything present when it was accepted.
        for i, (item, prov) in enumerate(zip(out.items, out.provenance)):
            if prov != SEED:
                assert all(band[0] <= scorer(item, y) <= band[1] for y in out.items[:i])

    def test_deterministic(self, sheet_doc, scorer, band):
        cfg = FilterConfig(band[0], band[1], target_size=40)
        a = bootstrap(sheet_doc, TemplateGenerator(2), cfg, scorer)
        b = bootstrap(sheet_doc, TemplateGenerator(2), cfg, scorer)
        assert a.items == b.items and a.provenance == b.provenance

    def test_stall(self, sheet_doc, model):
        class Nonsense:
            def generate(self, s, cap, n):
                return [D(s[0].task_text + " again")]

        cfg = FilterConfig(0.98, 0.99, target_size=50)
        with pytest.raises(StalledBootstrap) as info:
            bootstrap(sheet_doc, Nonsense(), cfg, lambda a, b: 0.0)
        assert len(info.value.partial) == len(sheet_doc.demonstrations)

    def test_calibrate_band(self):
        assert calibrate_band([0.7, 0.9, 0.8]) == (0.7, 0.9)
        with pytest.raises(ValueError):
            calibrate_band([])
        with pytest.raises(ConfigError):
            calibrate_band([0.5, 0.5])

    def test_score_distribution(self):
        items = [D("a"), D("b"), D("c")]
        table = {("a", "b"): 0.1, ("a", "c"): 0.2, ("b", "c"): 0.3}
        dist = score_distribution(items, table_score(table))
        assert dist["pairs"] == 3 and dist["min"] == 0.1 and dist["max"] == 0.3
        assert dist["median"] == pytest.approx(0.2)
        assert score_distribution(items[:1], table_score(table)) == {"pairs": 0}
