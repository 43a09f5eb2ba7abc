"""Toy-world contracts: generator postconditions, reward semantics, corruption,
flat encoding round trips, tokenization bijectivity, and teacher records."""

import numpy as np
import pytest

from latentflow.data import generate_tasks, read_task_file, task_from_dict, task_to_dict, write_task_file
from latentflow.scene import (
    CATEGORIES,
    ColorOf,
    CountIs,
    Exists,
    PromptSpec,
    Relation,
    Scene,
    SceneConfig,
    corrupt,
    decode_scene,
    empty_scene,
    encode_scene,
    make_teacher_records,
    reward,
    sample_task,
)
from latentflow.vocab import vocab_for

CFG = SceneConfig()
BOUNDS = {"plan": (1, 4), "draft": (1, 1), "diagnosis": (1, 3), "refine": (1, 3)}


class TestSampleTask:
    def test_reference_satisfies_spec(self):
        spec, scene = sample_task(0, "colors", CFG)
        assert reward(spec, scene, CFG) == 1.0

    def test_deterministic(self):
        a_spec, a_scene = sample_task(123, "position", CFG)
        b_spec, b_scene = sample_task(123, "position", CFG)
        assert a_spec == b_spec
        np.testing.assert_array_equal(a_scene.presence, b_scene.presence)
        np.testing.assert_array_equal(a_scene.colors, b_scene.colors)
        np.testing.assert_array_equal(a_scene.positions, b_scene.positions)

    def test_postcondition_sweep_all_categories(self):
        for category in CATEGORIES:
            for seed in range(1000):
                spec, scene = sample_task(seed, category, CFG)
                scene.validate(CFG)
                assert reward(spec, scene, CFG) == 1.0, (category, seed)

    def test_unknown_category_rejected(self):
        with pytest.raises(ValueError):
            sample_task(0, "nonsense", CFG)

    def test_category_arity_fixed(self):
        arity = {"single_object": 1, "two_object": 2, "counting": 1, "colors": 2, "position": 3, "color_attr": 4}
        for category, n in arity.items():
            for seed in range(20):
                spec, _ = sample_task(seed, category, CFG)
                assert len(spec.constraints) == n


class TestReward:
    def test_empty_scene_fails_exists(self):
        spec, _ = sample_task(0, "single_object", CFG)
        assert reward(spec, empty_scene(CFG), CFG) == 0.0

    def test_partial_credit(self):
        spec = PromptSpec("two_object", (Exists(0, 0), Exists(1, 1)))
        scene = empty_scene(CFG)
        scene.presence[2] = 1.0
        scene.colors[2] = np.eye(CFG.n_colors)[0]
        assert reward(spec, scene, CFG) == 0.5

    def test_slot_permutation_invariance(self):
        rng = np.random.default_rng(0)
        for seed in range(50):
            category = CATEGORIES[seed % len(CATEGORIES)]
            spec, scene = sample_task(seed, category, CFG)
            perm = rng.permutation(CFG.k_slots)
            shuffled = Scene(scene.presence[perm], scene.colors[perm], scene.positions[perm])
            assert reward(spec, shuffled, CFG) == reward(spec, scene, CFG)

    def test_relation_margin_is_strict(self):
        spec = PromptSpec("position", (Exists(0, 0), Exists(1, 1), Relation(0, 1, "left_of")))
        scene = empty_scene(CFG)
        scene.presence[:2] = 1.0
        scene.colors[0] = np.eye(CFG.n_colors)[0]
        scene.colors[1] = np.eye(CFG.n_colors)[1]
        scene.positions[0] = [0.5, 0.5]
        scene.positions[1] = [0.5 + CFG.rel_margin, 0.5]  # exactly at margin: violated
        assert reward(spec, scene, CFG) == pytest.approx(2 / 3)
        scene.positions[1] = [0.5 + CFG.rel_margin + 0.01, 0.5]
        assert reward(spec, scene, CFG) == 1.0

    def test_count_exact(self):
        spec = PromptSpec("counting", (CountIs(2),))
        scene = empty_scene(CFG)
        scene.presence[:2] = 1.0
        assert reward(spec, scene, CFG) == 1.0
        scene.presence[2] = 1.0
        assert reward(spec, scene, CFG) == 0.0

    def test_entity_binding_shares_slot(self):
        # both constraints reference entity 0, so they must bind to one slot
        spec = PromptSpec("colors", (Exists(0), ColorOf(0, 3)))
        scene = empty_scene(CFG)
        scene.presence[1] = 1.0
        scene.colors[1] = np.eye(CFG.n_colors)[2]  # wrong color
        assert reward(spec, scene, CFG) == 0.5


class TestCorrupt:
    def test_corruption_reduces_reward(self):
        for seed in range(300):
            category = CATEGORIES[seed % len(CATEGORIES)]
            spec, scene = sample_task(seed, category, CFG)
            bad = corrupt(scene, spec, seed, CFG)
            assert reward(spec, bad, CFG) < 1.0, (category, seed)

    def test_deterministic(self):
        spec, scene = sample_task(7, "color_attr", CFG)
        a = corrupt(scene, spec, 7, CFG)
        b = corrupt(scene, spec, 7, CFG)
        np.testing.assert_array_equal(a.presence, b.presence)
        np.testing.assert_array_equal(a.colors, b.colors)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_never_identical_to_input(self):
        for seed in range(100):
            category = CATEGORIES[seed % len(CATEGORIES)]
            spec, scene = sample_task(seed, category, CFG)
            bad = corrupt(scene, spec, seed, CFG)
            same = (
                np.array_equal(bad.presence, scene.presence)
                and np.array_equal(bad.colors, scene.colors)
                and np.array_equal(bad.positions, scene.positions)
            )
            assert not same

    def test_output_is_valid_scene(self):
        for seed in range(50):
            spec, scene = sample_task(seed, "position", CFG)
            corrupt(scene, spec, seed, CFG).validate(CFG)


class TestEncodeDecode:
    def test_round_trip_exact(self):
        for seed in range(100):
            category = CATEGORIES[seed % len(CATEGORIES)]
            _, scene = sample_task(seed, category, CFG)
            flat, _ = encode_scene(scene, CFG)
            back = decode_scene(flat, CFG)
            np.testing.assert_allclose(back.presence, scene.presence, atol=1e-6)
            np.testing.assert_allclose(back.colors, scene.colors, atol=1e-6)
            np.testing.assert_allclose(back.positions, scene.positions, atol=1e-6)

    def test_flat_dim(self):
        _, scene = sample_task(0, "colors", CFG)
        flat, tokens = encode_scene(scene, CFG)
        assert flat.shape == (CFG.k_slots * (1 + CFG.n_colors + 2),)
        assert tokens.shape == (CFG.k_slots, CFG.d_v)

    def test_zeros_decode_to_canonical_empty(self):
        s = decode_scene(np.zeros(CFG.flat_dim), CFG)
        np.testing.assert_array_equal(s.presence, 0.0)
        np.testing.assert_allclose(s.colors, 1.0 / CFG.n_colors)
        np.testing.assert_array_equal(s.positions, 0.0)

    def test_noise_decodes_to_valid_scene(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            decode_scene(rng.standard_normal(CFG.flat_dim) * 3, CFG).validate(CFG)

    def test_distinct_scenes_distinct_flats(self):
        flats = []
        for seed in range(60):
            _, scene = sample_task(seed, CATEGORIES[seed % 6], CFG)
            flat, _ = encode_scene(scene, CFG)
            flats.append(flat)
        for i in range(len(flats)):
            for j in range(i + 1, len(flats)):
                assert not np.allclose(flats[i], flats[j])

    def test_tokens_deterministic(self):
        _, scene = sample_task(3, "counting", CFG)
        t1 = encode_scene(scene, CFG)[1]
        t2 = encode_scene(scene, CFG)[1]
        np.testing.assert_array_equal(t1, t2)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            decode_scene(np.zeros(CFG.flat_dim + 1), CFG)


class TestVocab:
    def test_round_trip_all_categories(self):
        vocab = vocab_for(CFG)
        for seed in range(200):
            spec, _ = sample_task(seed, CATEGORIES[seed % 6], CFG)
            assert vocab.decode(vocab.encode(spec)) == spec

    def test_encode_deterministic(self):
        vocab = vocab_for(CFG)
        spec, _ = sample_task(5, "position", CFG)
        assert vocab.encode(spec) == vocab.encode(spec)

    def test_prompt_length_bounded(self):
        vocab = vocab_for(CFG)
        for seed in range(100):
            spec, _ = sample_task(seed, CATEGORIES[seed % 6], CFG)
            assert len(vocab.encode(spec)) <= vocab.max_prompt_len


class TestTeacherRecords:
    def test_plan_enumerates_constraints(self):
        spec, ref = sample_task(11, "color_attr", CFG)
        draft = corrupt(ref, spec, 11, CFG)
        records, lengths = make_teacher_records(spec, ref, draft, BOUNDS, CFG)
        assert lengths["plan"] == len(spec.constraints)
        assert lengths["draft"] == 1

    def test_diagnosis_counts_violations(self):
        spec, ref = sample_task(2, "two_object", CFG)
        draft = ref.copy()
        # violate exactly one of the two constraints
        sat_slot = int(np.flatnonzero(ref.present_mask())[0])
        draft.presence[sat_slot] = 0.0
        records, lengths = make_teacher_records(spec, ref, draft, BOUNDS, CFG)
        assert lengths["diagnosis"] == 1
        diag = [r for r in records if r.role == "diagnosis"]
        assert all("violated" in f[0] for r in diag for f in r.fields)

    def test_perfect_draft_gets_noop_diagnosis(self):
        spec, ref = sample_task(3, "colors", CFG)
        records, lengths = make_teacher_records(spec, ref, ref.copy(), BOUNDS, CFG)
        assert lengths["diagnosis"] == 1
        diag = [r for r in records if r.role == "diagnosis"]
        assert diag[0].fields[0][0] == "no_op"
        refine = [r for r in records if r.role == "refine"]
        assert refine[0].fields[0][0] == "no_op"

    def test_lengths_within_bounds(self):
        for seed in range(200):
            category = CATEGORIES[seed % 6]
            spec, ref = sample_task(seed, category, CFG)
            draft = corrupt(ref, spec, seed, CFG)
            _, lengths = make_teacher_records(spec, ref, draft, BOUNDS, CFG)
            for role, (lo, hi) in BOUNDS.items():
                assert lo <= lengths[role] <= hi, (category, seed, role)

    def test_deterministic(self):
        spec, ref = sample_task(4, "position", CFG)
        draft = corrupt(ref, spec, 4, CFG)
        r1, l1 = make_teacher_records(spec, ref, draft, BOUNDS, CFG)
        r2, l2 = make_teacher_records(spec, ref, draft, BOUNDS, CFG)
        assert r1 == r2 and l1 == l2

    def test_step_indices_one_based_contiguous(self):
        spec, ref = sample_task(9, "color_attr", CFG)
        draft = corrupt(ref, spec, 9, CFG)
        records, lengths = make_teacher_records(spec, ref, draft, BOUNDS, CFG)
        for role in ("plan", "diagnosis", "refine"):
            steps = [r.step_index for r in records if r.role == role]
            assert steps == list(range(1, lengths[role] + 1))


class TestTaskFile:
    def test_round_trip(self, tmp_path):
        tasks = generate_tasks(12, seed=0, bounds=BOUNDS, cfg=CFG)
        path = tmp_path / "tasks.jsonl"
        write_task_file(str(path), tasks, seed=0, cfg=CFG)
        header, back = read_task_file(str(path))
        assert header["n_tasks"] == 12 and header["version"] == 1
        for a, b in zip(tasks, back):
            assert task_to_dict(a) == task_to_dict(b)

    def test_byte_identical_regeneration(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_task_file(str(p1), generate_tasks(12, 5, BOUNDS, CFG), seed=5, cfg=CFG)
        write_task_file(str(p2), generate_tasks(12, 5, BOUNDS, CFG), seed=5, cfg=CFG)
        assert p1.read_bytes() == p2.read_bytes()

    def test_category_balance(self):
        tasks = generate_tasks(12, 0, BOUNDS, CFG)
        counts = {c: 0 for c in CATEGORIES}
        for t in tasks:
            counts[t.spec.category] += 1
        assert all(v == 2 for v in counts.values())

    def test_references_all_pass(self):
        for t in generate_tasks(30, 1, BOUNDS, CFG):
            assert reward(t.spec, t.reference, CFG) == 1.0
            assert reward(t.spec, t.draft, CFG) < 1.0

    def test_dict_round_trip(self):
        t = generate_tasks(1, 2, BOUNDS, CFG)[0]
        assert task_to_dict(task_from_dict(task_to_dict(t))) == task_to_dict(t)

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"format": "other"}\n')
        with pytest.raises(ValueError):
            read_task_file(str(p))
