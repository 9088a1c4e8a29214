import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loop_similarity
from tokenroute import synthetic
from tokenroute.errors import UnknownExecutor
from tokenroute.metaagent import ManagerConfig, MetaAgent
from tokenroute.self_instruct import SimilarityScorer
from tokenroute.simbench import (
    Report,
    ScriptedAgent,
    SimState,
    SimTask,
    Subtask,
    agent_match,
    agents_for_suite,
    compatible,
    execute_plan,
    execution_acc,
    load_suite,
    run_suite,
    sample_suite,
    save_suite,
    scripted_agents,
    subtask_acc,
    synthesize_multi_tasks,
)
from world import get_world, world_model

VLC = {"agent": "VLCAgent", "instruction": "kindly rewind the looped snapshot and the fullscreen video with vlc",
       "tags": ["video"], "writes": {"video.snapshot": "rewind:looped"}}
WRITER = {"agent": "WriterAgent", "instruction": "paginate the serif margin and the bold paragraph with docx2python",
          "tags": ["document"], "writes": {"document.margin": "paginate:serif"}}

# Loop oracle similarity of each paraphrase to the Writer instruction under the world model.
BELOW = ("paginate", 0.6640219783136979)
ABOVE = ("paginate the margin", 0.8758474050797012)


@pytest.fixture(scope="module")
def scorer():
    return SimilarityScorer(world_model()).score_texts


@pytest.fixture(scope="module")
def task():
    return synthesize_multi_tasks([VLC, WRITER])[0]


def exact(a, b):
    return 1.0 if a == b else 0.0


class TestSynthesis:
    def test_two_singles_two_orders(self):
        tasks = synthesize_multi_tasks([VLC, WRITER])
        assert [t.instruction for t in tasks] == [
            VLC["instruction"] + ", and then " + WRITER["instruction"],
            WRITER["instruction"] + ", and then " + VLC["instruction"],
        ]
        assert tasks[0].ground_truth_agents == {"VLCAgent", "WriterAgent"}
        assert [s.agent_id for s in tasks[0].ground_truth_subtasks] == ["VLCAgent", "WriterAgent"]
        assert tasks[0].goal == {"video.snapshot": "rewind:looped", "document.margin": "paginate:serif"}

    def test_shared_goal_key_excluded(self):
        clash = dict(WRITER, writes={"video.snapshot": "other"})
        assert synthesize_multi_tasks([VLC, clash]) == []

    def test_same_agent_excluded(self):
        other = dict(VLC, instruction="loop the clip", writes={"video.clip": "loop"})
        assert synthesize_multi_tasks([VLC, other]) == []

    def test_needs_two(self):
        with pytest.raises(ValueError):
            synthesize_multi_tasks([VLC])

    def test_triples(self):
        third = {"agent": "MailAgent", "instruction": "reply to the unread email", "tags": ["email"],
                 "writes": {"email.inbox": "reply"}}
        tasks = synthesize_multi_tasks([VLC, WRITER, third], triples=True)
        assert len(tasks) == 6 + 6
        assert all(len(t.ground_truth_agents) == len(t.ground_truth_subtasks) for t in tasks)

    def test_synthetic_suite_closure(self):
        tasks = synthesize_multi_tasks(synthetic.single_templates())
        assert all(len(t.ground_truth_agents) == 2 for t in tasks)
        assert all(compatible(*t.ground_truth_subtasks) for t in tasks)

    def test_sample_and_save(self, tmp_path):
        tasks = synthesize_multi_tasks(synthetic.single_templates())
        a, b = sample_suite(tasks, 50, seed=4), sample_suite(tasks, 50, seed=4)
        assert a == b and len(a) == 50
        assert sample_suite(tasks[:3], 10) == tasks[:3]
        save_suite(a, tmp_path / "s.json")
        assert load_suite(tmp_path / "s.json") == a

    def test_empty_ground_truth(self):
        with pytest.raises(ValueError):
            SimTask("x", ())


class TestAgentMatch:
    @pytest.mark.parametrize("pred,truth,expected", [
        ({"A", "B"}, {"A", "B"}, 1.0), ({"A"}, {"A", "B"}, 0.0), ({"A", "B", "C"}, {"A", "B"}, 0.0),
    ])
    def test_exact(self, pred, truth, expected):
        assert agent_match(pred, truth) == expected

    def test_jaccard(self):
        assert agent_match({"A"}, {"A", "B"}, jaccard=True) == 0.5
        assert agent_match(set(), set(), jaccard=True) == 1.0


class TestSubtaskAcc:
    def test_verbatim(self, task, scorer):
        assert subtask_acc(task.ground_truth_subtasks, task.ground_truth_subtasks, scorer) == 1.0

    def test_empty_prediction(self, task, scorer):
        assert subtask_acc([], task.ground_truth_subtasks, scorer) == 0.0

    def test_oracle_values(self, scorer):
        model = world_model()
        for text, frozen in (BELOW, ABOVE):
            assert abs(loop_similarity(text, WRITER["instruction"], model) - frozen) <= 1e-12
            assert abs(scorer(text, WRITER["instruction"]) - frozen) <= 1e-12

    @pytest.mark.parametrize("paraphrase,expected", [(BELOW[0], 0.5), (ABOVE[0], 1.0)])
    def test_paraphrase_straddles_threshold(self, task, scorer, paraphrase, expected):
        pred = [("VLCAgent", VLC["instruction"]), ("WriterAgent", paraphrase)]
        assert subtask_acc(pred, task.ground_truth_subtasks, scorer) == expected

    def test_wrong_agent_never_matches(self, task, scorer):
        pred = [("WriterAgent", VLC["instruction"]), ("VLCAgent", WRITER["instruction"])]
        assert subtask_acc(pred, task.ground_truth_subtasks, scorer) == 0.0

    def test_one_to_one(self):
        gold = [("A", "x"), ("B", "y"), ("A", "z")]
        assert subtask_acc([("A", "x"), ("B", "y")], gold, exact) == pytest.approx(2 / 3)
        assert subtask_acc([("A", "x"), ("A", "x"), ("B", "y")], gold, exact) == pytest.approx(2 / 3)

    def test_greedy_picks_best_pair_first(self):
        table = {("p1", "g1"): 0.8, ("p1", "g2"): 0.9, ("p2", "g1"): 0.78, ("p2", "g2"): 0.1}
        score = lambda a, b: table[(a, b)]
        # p1 goes to g2 (0.9); p2 then takes g1 at 0.78, which clears 0.77.
        assert subtask_acc([("A", "p1"), ("A", "p2")], [("A", "g1"), ("A", "g2")], score) == 1.0

    def test_bad_threshold(self, task, scorer):
        with pytest.raises(ValueError):
            subtask_acc([], task.ground_truth_subtasks, scorer, threshold=1.0)

    @settings(max_examples=50, deadline=None)
    @given(steps=st.lists(st.tuples(st.sampled_from("ABC"), st.sampled_from(["x", "y", "z", "w"])),
                          min_size=1, max_size=6))
    def test_self_is_one_and_bounded(self, steps):
        assert subtask_acc(steps, steps, exact) == 1.0
        other = list(reversed(steps))[:-1]
        assert 0.0 <= subtask_acc(other, steps, exact) <= 1.0


class TestExecute:
    def test_ground_truth_plan(self, task, scorer):
        agents = agents_for_suite([task])
        state = execute_plan(task.ground_truth_subtasks, task, agents, scorer)
        assert state.values == task.goal and execution_acc(state, task) == 1.0
        assert [e.outcome for e in state.log] == ["ok", "ok"]

    def test_missing_tags(self, task, scorer):
        agents = agents_for_suite([task])
        plan = [("VLCAgent", VLC["instruction"]), ("VLCAgent", WRITER["instruction"])]
        state = execute_plan(plan, task, agents, scorer)
        assert [e.outcome for e in state.log] == ["ok", "missing_tags"]
        assert "document.margin" not in state.values and execution_acc(state, task) == 0.0

    def test_no_match(self, task, scorer):
        agents = agents_for_suite([task])
        plan = [("VLCAgent", VLC["instruction"]), ("WriterAgent", BELOW[0])]
        state = execute_plan(plan, task, agents, scorer)
        assert [e.outcome for e in state.log] == ["ok", "no_match"]

    def test_unknown_executor(self, task, scorer):
        with pytest.raises(UnknownExecutor):
            execute_plan([("GhostAgent", "boo")], task, agents_for_suite([task]), scorer)

    def test_initial_state_untouched(self, scorer):
        t = SimTask("x", (Subtask.from_template(VLC),), (("video.snapshot", "old"),))
        state = execute_plan([], t, agents_for_suite([t]), scorer)
        assert state.values == {"video.snapshot": "old"} and execution_acc(state, t) == 0.0

    def test_execution_acc_examples(self, task):
        assert execution_acc(SimState(dict(task.goal)), task) == 1.0
        partial = dict(task.goal)
        partial.pop("document.margin")
        assert execution_acc(SimState(partial), task) == 0.0
        assert execution_acc(SimState(), task) == 0.0

    def test_scripted_agent_write_guard(self):
        agent = ScriptedAgent("A", frozenset({"t"}), frozenset({"k"}))
        with pytest.raises(PermissionError):
            agent.apply(SimState(), [("other", "v")])

    def test_scripted_agents_from_templates(self):
        agents = scripted_agents([Subtask.from_template(VLC), Subtask.from_template(WRITER)])
        assert agents["VLCAgent"].writable_keys == {"video.snapshot"}
        assert agents["WriterAgent"].capability_tags == {"document"}

    def test_log_completeness(self, task, scorer):
        plan = [("VLCAgent", "a"), ("WriterAgent", "b"), ("VLCAgent", VLC["instruction"])]
        state = execute_plan(plan, task, agents_for_suite([task]), scorer)
        assert [(e.agent_id, e.subtask) for e in state.log] == plan


class TestReport:
    def test_empty_suite(self, scorer):
        report = run_suite([], None, {}, scorer, ground_truth=True)
        assert report.to_dict()["aggregates"] == {"agent_match": None, "subtask_acc": None, "execution_acc": None}
        assert json.loads(report.to_json())["n_tasks"] == 0

    def test_ground_truth_harness(self, scorer):
        tasks = synthesize_multi_tasks(synthetic.single_templates())[:60]
        report = run_suite(tasks, None, score=scorer, ground_truth=True)
        aggregates = report.to_dict()["aggregates"]
        assert aggregates == {"agent_match": 1.0, "subtask_acc": 1.0, "execution_acc": 1.0}
        assert report.config["harness"] == "ground_truth"

    def test_aggregates_are_means(self):
        report = Report([{"agent_match": 1.0, "subtask_acc": 0.5, "execution_acc": 0.0},
                         {"agent_match": 0.0, "subtask_acc": 1.0, "execution_acc": 1.0}])
        assert report.to_dict()["aggregates"] == {"agent_match": 0.5, "subtask_acc": 0.75, "execution_acc": 0.5}

    def test_requires_scorer_or_meta(self):
        with pytest.raises(ValueError):
            run_suite([], None)


@pytest.fixture(scope="module")
def world():
    return get_world()


@pytest.fixture(scope="module")
def manager(world):
    return MetaAgent(world.model, world.trained, world.registry, ManagerConfig(mode_override="manager"))


class TestWithMetaAgent:
    def test_vlc_writer_composites_end_to_end(self, manager):
        singles = [t for t in synthetic.single_templates() if t["agent"] in ("VLCAgent", "WriterAgent")]
        tasks = synthesize_multi_tasks(singles)
        report = run_suite(tasks, manager)
        assert len(tasks) == 32
        aggregates = report.to_dict()["aggregates"]
        assert aggregates["agent_match"] >= 0.90 and aggregates["subtask_acc"] >= 0.90
        assert aggregates["execution_acc"] >= 0.85
        for rec in report.records:
            if rec["agent_match"] == 1.0:
                assert len(rec["plan"]) == 2 and rec["predicted_agents"] == ["VLCAgent", "WriterAgent"]

    def test_failures_are_scored_not_raised(self, world):
        router = MetaAgent(world.model, world.trained, world.registry,
                           ManagerConfig(mode_override="router", max_steps=1))
        tasks = world.suite[:5]
        report = run_suite(tasks, router)
        assert len(report.records) == 5
        for rec in report.records:
            assert rec["mode"] in ("router", "failed")
            assert 0.0 <= rec["execution_acc"] <= 1.0
            assert rec["agent_match"] == 0.0  # one agent can never equal a two-agent truth

    def test_misrouted_agent_without_templates(self, world):
        # Only the VLC and Writer templates are in the suite, so most agents have no executor of their own.
        t = synthesize_multi_tasks([VLC, WRITER])[0]
        router = MetaAgent(world.model, world.trained, world.registry, ManagerConfig(mode_override="router"))
        rec = run_suite([t], router).records[0]
        assert len(rec["log"]) == 1 and rec["execution_acc"] == 0.0

    def test_report_byte_stable(self, world, manager, tmp_path):
        tasks = world.suite[:15]
        run_suite(tasks, manager).save(tmp_path / "a.json")
        run_suite(tasks, manager).save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        payload = json.loads((tmp_path / "a.json").read_text())
        assert list(payload) == ["format_version", "config", "n_tasks", "aggregates", "records"]
        assert payload["config"]["mode_override"] == "manager" and payload["config"]["k"] == 5
