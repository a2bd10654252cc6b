import numpy as np
import pytest

from demotraj.data_io import (
    CSV_COLUMNS,
    BadRatios,
    HorizonSpec,
    IrregularTimestep,
    MalformedRow,
    MissingTarget,
    load_trajectory_csv,
    read_scene_json,
    split,
    synth_dataset,
    synth_scenario,
    write_scene_json,
    write_trajectory_csv,
)
from demotraj.dynamics import rollout_arrays

TINY = HorizonSpec(t_p_s=0.6, t_f_s=0.4, t_s_s=0.2, dt_s=0.2)  # 3 history + 2 future steps


def _csv(tmp_path, rows, header=CSV_COLUMNS):
    path = tmp_path / "tracks.csv"
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _two_vehicle_rows():
    rows = [("s", "t", f, 2.0 * f, 0.0, 10.0, 0.0, 1) for f in range(12)]
    rows += [("s", "n", f, 2.0 * f + 8.0, 3.5, 10.0, 0.0, 0) for f in range(6)]
    return rows


def test_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("", encoding="utf-8")
    assert load_trajectory_csv(path, TINY) == []


def test_header_only(tmp_path):
    assert load_trajectory_csv(_csv(tmp_path, []), TINY) == []


def test_single_vehicle_has_no_surroundings(tmp_path):
    rows = [("a", "t", f, float(f), 0.0, 5.0, 0.0, 1) for f in range(5)]
    scenes = load_trajectory_csv(_csv(tmp_path, rows), TINY)
    assert len(scenes) == 1
    assert scenes[0].n_surround == 0
    assert scenes[0].target_history.shape == (3, 4)
    assert scenes[0].target_future.shape == (2, 4)


def test_hand_walked_windows(tmp_path):
    # 12 target frames, windows of 5 every 2 frames start at 0, 2, 4, 6.
    # the neighbour exists for frames 0..5, so only windows whose current
    # frame (start + 2) it covers keep it: starts 0 and 2.
    scenes = load_trajectory_csv(_csv(tmp_path, _two_vehicle_rows()), TINY, stride=2)
    assert [s.scene_id for s in scenes] == ["s/0", "s/2", "s/4", "s/6"]
    assert [s.n_surround for s in scenes] == [1, 1, 0, 0]
    second = scenes[1]
    np.testing.assert_array_equal(second.present[0], [True, True, True, True, False])
    # frame 6 is missing for the neighbour and holds frame 5's state
    np.testing.assert_array_equal(second.surroundings[0, 4], second.surroundings[0, 3])
    np.testing.assert_array_equal(second.target_history[:, 0], [4.0, 6.0, 8.0])


def test_missing_velocity_from_central_differences(tmp_path):
    rows = [("a", "t", f, 3.0 * f, 0.5 * f, "", "", 1) for f in range(5)]
    sc = load_trajectory_csv(_csv(tmp_path, rows), TINY)[0]
    np.testing.assert_allclose(sc.target_history[:, 2], 15.0)
    np.testing.assert_allclose(sc.target_history[:, 3], 2.5)


def test_malformed_row_reports_line(tmp_path):
    rows = _two_vehicle_rows()
    rows[3] = ("s", "t", 3, "abc", 0.0, 10.0, 0.0, 1)
    with pytest.raises(MalformedRow) as err:
        load_trajectory_csv(_csv(tmp_path, rows), TINY)
    assert err.value.line == 5


def test_missing_column(tmp_path):
    with pytest.raises(MalformedRow):
        load_trajectory_csv(_csv(tmp_path, [], header=CSV_COLUMNS[:-1]), TINY)


def test_missing_target(tmp_path):
    rows = [("a", "n", f, float(f), 0.0, 5.0, 0.0, 0) for f in range(5)]
    with pytest.raises(MissingTarget):
        load_trajectory_csv(_csv(tmp_path, rows), TINY)


def test_gap_in_target_frames(tmp_path):
    rows = [("a", "t", f, float(f), 0.0, 5.0, 0.0, 1) for f in (0, 1, 2, 4, 5)]
    with pytest.raises(IrregularTimestep):
        load_trajectory_csv(_csv(tmp_path, rows), TINY)


def test_duplicate_frame(tmp_path):
    rows = [("a", "t", f, float(f), 0.0, 5.0, 0.0, 1) for f in (0, 1, 1, 2, 3)]
    with pytest.raises(MalformedRow):
        load_trajectory_csv(_csv(tmp_path, rows), TINY)


def test_history_only_when_future_optional(tmp_path):
    rows = [("a", "t", f, float(f), 0.0, 5.0, 0.0, 1) for f in range(4)]
    assert load_trajectory_csv(_csv(tmp_path, rows), TINY) == []
    scenes = load_trajectory_csv(_csv(tmp_path, rows), TINY, require_future=False)
    assert len(scenes) == 1 and scenes[0].target_future is None


def test_windows_respect_horizon(tmp_path):
    scenes = load_trajectory_csv(_csv(tmp_path, _two_vehicle_rows()), TINY, stride=1)
    for s in scenes:
        assert s.target_history.shape[0] == TINY.p_steps
        assert s.target_future.shape[0] == TINY.f_steps
        assert s.surroundings.shape[1] == TINY.p_steps + TINY.f_steps


def test_csv_roundtrip(tmp_path):
    scenes = synth_dataset(3, 0.1, 5)
    path = tmp_path / "out.csv"
    write_trajectory_csv(scenes, path)
    back = load_trajectory_csv(path, HorizonSpec())
    assert [s.scene_id for s in back] == [f"{s.scene_id}/0" for s in scenes]
    for a, b in zip(scenes, back):
        np.testing.assert_array_equal(a.target_history, b.target_history)
        np.testing.assert_array_equal(a.target_future, b.target_future)


def test_json_roundtrip_is_exact(tmp_path):
    scenes = synth_dataset(4, 0.1, 9)
    path = tmp_path / "scenes.json"
    write_scene_json(scenes, path)
    back = read_scene_json(path)
    write_scene_json(back, tmp_path / "again.json")
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()
    np.testing.assert_array_equal(back[2].surroundings, scenes[2].surroundings)


def test_synth_deterministic():
    a, ca = synth_scenario("turn", 0.1, 42)
    b, cb = synth_scenario("turn", 0.1, 42)
    np.testing.assert_array_equal(a.target_history, b.target_history)
    np.testing.assert_array_equal(a.surroundings, b.surroundings)
    np.testing.assert_array_equal(ca, cb)


def test_noise_free_straight_is_rollout(attrs):
    sc, ctrl = synth_scenario("straight", 0.0, 3)
    states = np.concatenate([sc.target_history, sc.target_future])
    np.testing.assert_array_equal(states[1:], rollout_arrays(states[0], ctrl, attrs, sc.dt_s))


@pytest.mark.parametrize("seed", range(10))
def test_lane_change_left_moves_one_lane(seed):
    sc, _ = synth_scenario("lane_change_left", 0.0, seed)
    states = np.concatenate([sc.target_history, sc.target_future])
    assert 3.0 <= states[-1, 1] - states[0, 1] <= 4.5


def test_unknown_kind():
    with pytest.raises(ValueError):
        synth_scenario("hover", 0.0, 0)


def test_split_all_train():
    tr, va, te = split(list(range(7)), (1.0, 0.0, 0.0), 0)
    assert sorted(tr) == list(range(7)) and va == [] and te == []


def test_split_disjoint_cover():
    tr, va, te = split(list(range(100)), (0.7, 0.1, 0.2), 4)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    assert sorted(tr + va + te) == list(range(100))


def test_split_golden():
    assert split(list(range(20)), (0.6, 0.2, 0.2), 3) == (
        [16, 12, 18, 8, 3, 13, 15, 10, 6, 1, 2, 11],
        [17, 0, 14, 9],
        [4, 7, 5, 19],
    )


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.5, 0.6, -0.1), (0.3, 0.3, 0.3)])
def test_split_bad_ratios(ratios):
    with pytest.raises(BadRatios):
        split(list(range(5)), ratios, 0)


def test_horizon_steps():
    h = HorizonSpec()
    assert (h.p_steps, h.f_steps, h.s_steps) == (15, 25, 10)
    with pytest.raises(ValueError):
        HorizonSpec(t_p_s=0.3)
