import numpy as np
import pytest

from nahid.errors import InvalidConfig, MalformedFile
from nahid.executor import (
    ActionLog,
    PhantomEnv,
    detect_at,
    execute,
    load_plan,
    plan_targets,
    validate_plan,
)
from nahid.phantom import SceneSpec, generate_scene
from nahid.sinatree import TaskDescriptor


@pytest.fixture
def scenario_plan(scenarios_dir):
    return load_plan(scenarios_dir / "scenario_ovary.json")


def scenario_env(plan, seed=None):
    return PhantomEnv.from_spec(plan.environment, seed=seed)


class TestPlanTargets:
    def test_empty_mask(self):
        assert plan_targets(np.zeros((8, 8), dtype=bool), spacing=3) == []

    def test_single_pixel_any_spacing(self):
        mask = np.zeros((12, 12), dtype=bool)
        mask[7, 3] = True
        for spacing in (1, 2, 5):
            assert plan_targets(mask, spacing) == [(3, 7)]

    def test_filled_square_stride_four(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[0:8, 0:8] = True
        assert plan_targets(mask, 4) == [(0, 0), (4, 0), (0, 4), (4, 4)]

    def test_points_always_inside_mask(self):
        rng = np.random.default_rng(81)
        for _ in range(50):
            mask = rng.random((16, 16)) < 0.3
            for x, y in plan_targets(mask, int(rng.integers(1, 5))):
                assert mask[y, x]

    def test_row_major_order(self):
        mask = np.ones((5, 5), dtype=bool)
        pts = plan_targets(mask, 2)
        assert pts == [(0, 0), (2, 0), (4, 0), (0, 2), (2, 2), (4, 2),
                       (0, 4), (2, 4), (4, 4)]

    def test_spacing_validated(self):
        with pytest.raises(InvalidConfig):
            plan_targets(np.ones((4, 4), dtype=bool), 0)


class TestPhantomEnv:
    def test_ablate_clears_disk(self):
        scene = generate_scene(
            SceneSpec(size=64, num_regions=3, lesion=True, seed=4, lesion_area=60))
        env = PhantomEnv(scene)
        before = env.lesion_area
        ys, xs = np.nonzero(env.lesion_mask())
        cx, cy = int(xs[0]), int(ys[0])
        env.ablate([(cx, cy)], radius=2.0)
        after = env.lesion_area
        assert after < before
        assert not env.lesion_mask()[cy, cx]

    def test_observe_rerenders_after_ablation(self):
        scene = generate_scene(
            SceneSpec(size=64, num_regions=3, lesion=True, seed=4, lesion_area=60))
        env = PhantomEnv(scene)
        frame0, truth0 = env.observe("x")
        assert np.array_equal(truth0.data, scene.truth.data)
        env.ablate(plan_targets(env.lesion_mask(), 1), radius=1.5)
        frame1, truth1 = env.observe("x")
        assert env.lesion_area == 0
        assert (truth1.data != scene.lesion_class).all()
        # texture stays put: pixels away from the lesion are unchanged
        far = ~np.isin(scene.truth.data, [scene.lesion_class])
        assert np.array_equal(frame0.data[far], frame1.data[far])


class TestDetectAt:
    def test_clean_lesion_counted_exactly(self, scenario_plan):
        env = scenario_env(scenario_plan)
        frame, truth = env.observe("left_ovary_focus")
        res = detect_at(scenario_plan, "left_ovary_focus", frame, truth=truth)
        assert res.area == 60
        assert res.confidence == pytest.approx(1.0)
        assert np.array_equal(res.target_mask, env.lesion_mask())

    def test_no_lesion_detects_nothing(self, scenario_plan):
        env = PhantomEnv.from_spec({**scenario_plan.environment, "lesion": False})
        frame, truth = env.observe("left_ovary_focus")
        res = detect_at(scenario_plan, "left_ovary_focus", frame, truth=truth)
        assert res.area == 0
        assert res.confidence == 0.0

    def test_navigate_node_rejected(self, scenario_plan):
        env = scenario_env(scenario_plan)
        frame, truth = env.observe("navel_entry")
        with pytest.raises(InvalidConfig):
            detect_at(scenario_plan, "navel_entry", frame, truth=truth)


class TestExecuteScenario:
    def test_complete_with_verified_clearance(self, scenario_plan):
        env = scenario_env(scenario_plan)
        true_lesion = env.lesion_mask()
        log = execute(scenario_plan, env)
        assert log.terminal == "COMPLETE"
        assert log.events[0].kind == "ENTER"
        assert log.events[0].node_id == scenario_plan.tree.root
        assert log.events_of("VERIFY_RESULT")[-1].payload["area"] == 0
        assert log.events_of("COMPLETE")[0].payload["outcome"] == "treated"
        for ev in log.events_of("TREAT_FIRE"):
            for x, y in ev.payload["targets"]:
                assert true_lesion[y, x]

    def test_exactly_one_terminal_event(self, scenario_plan):
        log = execute(scenario_plan, scenario_env(scenario_plan))
        terminals = [ev for ev in log.events
                     if ev.kind in ("COMPLETE", "ABORT")]
        assert len(terminals) == 1

    def test_byte_identical_logs_same_seed(self, scenario_plan):
        a = execute(scenario_plan, scenario_env(scenario_plan, seed=123))
        b = execute(scenario_plan, scenario_env(scenario_plan, seed=123))
        assert a.to_jsonl() == b.to_jsonl()

    def test_no_lesion_completes_with_no_treatment(self, scenario_plan):
        env = PhantomEnv.from_spec({**scenario_plan.environment, "lesion": False})
        log = execute(scenario_plan, env)
        assert log.terminal == "COMPLETE"
        assert log.events_of("COMPLETE")[0].payload["outcome"] == "no_treatment"
        assert not log.events_of("TREAT_FIRE")

    def test_missing_model_rolls_back_then_aborts(self, scenario_plan):
        scenario_plan.registry = scenario_plan.registry.without("left_ovary_focus")
        log = execute(scenario_plan, scenario_env(scenario_plan))
        assert log.terminal == "ABORT"
        rollback_nodes = [ev.node_id for ev in log.events_of("ROLLBACK")]
        assert rollback_nodes == ["left_ovary_focus", "mid_abdomen", "navel_entry"]
        assert log.events_of("ABORT")[0].payload["error"] == "ModelNotFound"

    def test_residual_areas_non_increasing(self, scenarios_dir):
        # sparse firing lattice forces several treat iterations
        plan = load_plan(scenarios_dir / "scenario_ovary.json")
        node = plan.tree.node("left_ovary_focus")
        object.__setattr__(node, "task", TaskDescriptor(
            "Treat", target_class="endometrioma", spacing=4, max_iters=8))
        env = PhantomEnv.from_spec({**plan.environment, "lesion_area": 200})
        log = execute(plan, env)
        areas = [ev.payload["area"] for ev in log.events_of("VERIFY_RESULT")]
        assert areas == sorted(areas, reverse=True)
        assert log.terminal in ("COMPLETE", "ABORT")

    def test_fires_stay_inside_current_lesion(self, scenarios_dir):
        # every fired point must be lesion tissue at the moment of planning,
        # across all treat iterations
        plan = load_plan(scenarios_dir / "scenario_ovary.json")
        node = plan.tree.node("left_ovary_focus")
        object.__setattr__(node, "task", TaskDescriptor(
            "Treat", target_class="endometrioma", spacing=3, max_iters=8))
        inner = PhantomEnv.from_spec({**plan.environment, "lesion_area": 150})

        class RecordingEnv:
            def __init__(self, env):
                self.env = env
                self.seed = env.seed
                self.fired_ok = True

            def observe(self, node_id):
                return self.env.observe(node_id)

            def ablate(self, points, radius):
                mask = self.env.lesion_mask()
                self.fired_ok &= all(mask[y, x] for x, y in points)
                self.env.ablate(points, radius)

        rec = RecordingEnv(inner)
        log = execute(plan, rec)
        assert log.events_of("TREAT_FIRE")
        assert rec.fired_ok

    def test_geomodel_warning_when_organ_not_expected(self, scenario_plan):
        # aim at a class the geometric model never mentions near the ovary
        plan = scenario_plan
        node = plan.tree.node("left_ovary_focus")
        object.__setattr__(node, "task", TaskDescriptor(
            "Detect", target_class="organ_0", min_area=1))
        log = execute(plan, scenario_env(plan))
        detect = log.events_of("DETECT_RESULT")[0]
        assert detect.payload.get("geomodel_warning") is True
        assert log.terminal == "COMPLETE"

    def test_detect_failure_is_recorded_not_fatal(self, scenario_plan):
        plan = scenario_plan
        node = plan.tree.node("left_ovary_focus")
        object.__setattr__(node, "task", TaskDescriptor(
            "Detect", target_class="endometrioma", min_area=10))
        env = PhantomEnv.from_spec({**plan.environment, "lesion": False})
        log = execute(plan, env)
        detect = log.events_of("DETECT_RESULT")[0]
        assert detect.payload["success"] is False
        assert log.terminal == "COMPLETE"


class TestPlanValidation:
    def test_bundled_plan_valid(self, scenario_plan):
        assert validate_plan(scenario_plan).ok
        assert validate_plan(scenario_plan, check_registry=True).ok

    def test_state_order_must_start_at_root(self, scenario_plan):
        scenario_plan.state_order = ["mid_abdomen", "left_ovary_focus"]
        report = validate_plan(scenario_plan)
        assert not report.ok

    def test_state_order_must_follow_edges(self, scenario_plan):
        scenario_plan.state_order = ["navel_entry", "left_ovary_focus"]
        report = validate_plan(scenario_plan)
        assert not report.ok
        with pytest.raises(InvalidConfig):
            execute(scenario_plan, scenario_env(scenario_plan))


class TestActionLog:
    def test_jsonl_round_trip(self, scenario_plan):
        log = execute(scenario_plan, scenario_env(scenario_plan))
        again = ActionLog.from_jsonl(log.to_jsonl())
        assert again.to_jsonl() == log.to_jsonl()

    def test_bad_header_rejected(self):
        with pytest.raises(MalformedFile):
            ActionLog.from_jsonl('{"schema":"other/9","seed":0}\n')

    def test_empty_rejected(self):
        with pytest.raises(MalformedFile):
            ActionLog.from_jsonl("")
