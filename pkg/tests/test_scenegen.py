import filecmp
import os

import numpy as np
from scipy import ndimage

from src.gridworld import SceneDistances, load_episode, load_scene
from src.scenegen import CATEGORIES, generate_episode, generate_scene, write_suite


def test_scene_is_deterministic_per_seed():
    a, b = generate_scene(7), generate_scene(7)
    assert np.array_equal(a.occupancy, b.occupancy)
    assert a.instances == b.instances
    assert a.scene_id == "scene_0007"


def test_scene_is_walled_and_connected():
    for seed in range(5):
        scene = generate_scene(seed)
        occ = scene.occupancy
        assert occ[0, :].all() and occ[-1, :].all() and occ[:, 0].all() and occ[:, -1].all()
        _, count = ndimage.label(~occ, structure=np.ones((3, 3), dtype=bool))
        assert count == 1


def test_instances_sit_on_obstacle_cells():
    scene = generate_scene(11)
    assert 0 < len(scene.instances) <= 8
    for k, inst in enumerate(scene.instances):
        assert inst.instance_id == k
        assert inst.category == CATEGORIES[k % len(CATEGORIES)]
        assert all(scene.occupancy[cell] for cell in inst.footprint)


def test_episode_starts_are_clustered_and_free():
    scene = generate_scene(3)
    episode = generate_episode(scene, seed=4, n_agents=4, n_goals=3, max_steps=50)
    distances = SceneDistances(scene)
    cells = [(int(p.y // scene.resolution), int(p.x // scene.resolution)) for p in episode.start_poses]
    assert len(set(cells)) == 4
    assert not any(scene.occupancy[c] for c in cells)
    field = distances.field(cells[0])
    assert all(np.isfinite(field[c]) for c in cells)
    assert episode.max_steps == 50


def test_episode_goals_cover_their_category():
    scene = generate_scene(3)
    episode = generate_episode(scene, seed=4)
    labels = [g.label for g in episode.goals]
    assert len(labels) == len(set(labels))
    for goal in episode.goals:
        expected = {i.instance_id for i in scene.instances if i.category == goal.label}
        assert set(goal.valid_instance_ids) == expected


def test_write_suite_is_loadable_and_reproducible(tmp_path):
    scenes, episodes = write_suite(str(tmp_path / "a"), count=2, seed=1, n_agents=2, max_steps=30)
    assert [os.path.basename(p) for p in scenes] == ["scene_0000.scene", "scene_0001.scene"]
    assert [os.path.basename(p) for p in episodes] == ["ep_0000.episode", "ep_0001.episode"]
    for scene_path, episode_path in zip(scenes, episodes):
        scene = load_scene(scene_path)
        episode = load_episode(episode_path, scene)
        assert episode.scene_id == scene.scene_id
        assert len(episode.start_poses) == 2
        assert episode.max_steps == 30

    again, _ = write_suite(str(tmp_path / "b"), count=2, seed=1, n_agents=2, max_steps=30)
    assert all(filecmp.cmp(x, y, shallow=False) for x, y in zip(scenes, again))
