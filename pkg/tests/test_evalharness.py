"""Tests for navigation metrics, split evaluation, baselines, ablations and tables."""

import numpy as np
import pytest

from labelnav.errors import EmptyResultsError, InvalidFlagsError, UnreachableTargetError
from labelnav.evalharness import (PRESETS, EpisodeResult, RunReport, ablation_table, distance_stratified,
                                  distance_table, eval_splits, evaluate_random, evaluation_episodes,
                                  evaluation_specs, metric_isr, metric_sr, metric_spl, plain_baseline,
                                  random_actions, random_policy, run_ablation, size_stratified, size_table,
                                  split_table)
from labelnav.gridworld import SPLIT_NAMES, NUM_ACTIONS
from labelnav.metatrain import MetaLearner

# Meta-training length for the default-world learning check
TRAINING_EPISODES = 20_000


def _result(i: int, success: int, steps: int, shortest, size: str = 'big') -> EpisodeResult:
    return EpisodeResult(f'ep-{i}', success, steps, shortest, 'known', size)


class TestMetrics:

    def test_success_rate(self):
        results = [_result(0, 1, 4, 4), _result(1, 0, 9, 3), _result(2, 1, 5, 5), _result(3, 0, 2, 2)]
        assert metric_sr(results) == pytest.approx(0.5)

    def test_spl_halves_on_double_length(self):
        assert metric_spl([_result(0, 1, 8, 4)]) == pytest.approx(0.5)

    def test_spl_caps_at_one(self):
        assert metric_spl([_result(0, 1, 3, 3)]) == pytest.approx(1.0)
        assert metric_spl([_result(0, 0, 3, 3)]) == 0.0

    def test_spl_never_exceeds_sr(self):
        rng = np.random.default_rng(0)
        results = [_result(i, int(rng.integers(2)), int(rng.integers(1, 20)), int(rng.integers(1, 20)))
                   for i in range(50)]
        assert 0.0 <= metric_spl(results) <= metric_sr(results) <= 1.0

    def test_empty_results(self):
        with pytest.raises(EmptyResultsError):
            metric_sr([])
        with pytest.raises(EmptyResultsError):
            metric_spl([])

    def test_unreachable_episode(self):
        with pytest.raises(UnreachableTargetError):
            metric_spl([_result(0, 0, 3, None)])

    def test_invalid_step_count(self):
        with pytest.raises(ValueError):
            _result(0, 1, 0, 3)

    def test_isr(self):
        assert metric_isr([1, 0, 1, 1], [1, 0, 0, 1]) == pytest.approx(0.75)
        with pytest.raises(EmptyResultsError):
            metric_isr([1], [])

    def test_distance_strata(self):
        results = [_result(0, 1, 2, 2), _result(1, 1, 6, 6), _result(2, 0, 7, 7)]
        strata = distance_stratified(results)
        assert strata['L>=1']['episodes'] == 3
        assert strata['L>=5']['episodes'] == 2
        assert strata['L>=5']['sr'] == pytest.approx(0.5)
        assert 'L>=5' not in distance_stratified([_result(0, 1, 2, 2)])

    def test_size_strata(self):
        strata = size_stratified([_result(0, 1, 2, 2, 'small'), _result(1, 0, 2, 2, 'big')])
        assert strata['small']['sr'] == 1.0 and strata['big']['sr'] == 0.0


class TestGoldenTrace:
    """Ten fixed episodes with SR and SPL worked out by hand."""

    # (success, steps, shortest path)
    TRACE = ((1, 4, 4), (1, 8, 4), (0, 10, 3), (1, 5, 5), (0, 100, 7),
             (1, 12, 9), (1, 7, 2), (0, 1, 1), (1, 20, 5), (1, 6, 1))

    @pytest.fixture
    def trace(self):
        return [_result(i, *row) for i, row in enumerate(self.TRACE)]

    def test_success_rate(self, trace):
        assert abs(metric_sr(trace) - 0.7) <= 1e-12

    def test_spl(self, trace):
        # 1 + 1/2 + 1 + 3/4 + 2/7 + 1/4 + 1/6 = 83/21
        assert abs(metric_spl(trace) - 83 / 210) <= 1e-12

    def test_long_path_stratum(self, trace):
        long = distance_stratified(trace)['L>=5']
        assert long['episodes'] == 4
        assert abs(long['sr'] - 0.75) <= 1e-12
        assert abs(long['spl'] - 0.5) <= 1e-12


class TestRandomWalker:

    def test_uniform_actions(self):
        counts = np.bincount(random_actions(60_000, seed=1), minlength=NUM_ACTIONS) / 60_000
        np.testing.assert_allclose(counts, 1.0 / 6.0, atol=0.01)

    def test_seeded(self, context):
        specs = evaluation_specs(context.scenes_of('test'), context.split, 'known', 3, 0, context.settings.world)
        a = random_policy(specs, context.scenes, 2, context.settings.world)
        b = random_policy(specs, context.scenes, 2, context.settings.world)
        assert a == b
        assert all(1 <= r.steps <= context.settings.world.max_steps for r in a)

    def test_random_report(self, context):
        report = evaluate_random(context.scenes_of('test'), context.split, context.settings, 2, (0, 1))
        assert report.method == 'random'
        assert set(report.splits) == set(SPLIT_NAMES)

    def test_random_report_on_given_episodes(self, context):
        scenes = context.scenes_of('test')
        sets = evaluation_episodes(scenes, context.split, 2, (0, 1), context.settings.world)
        given = evaluate_random(scenes, context.split, context.settings, 2, (0, 1), episode_sets=sets)
        generated = evaluate_random(scenes, context.split, context.settings, 2, (0, 1))
        assert given.content_hash() == generated.content_hash()
        with pytest.raises(ValueError):
            evaluate_random(scenes, context.split, context.settings, 3, (0, 1), episode_sets=sets)


class TestSplitEvaluation:

    def test_specs_draw_from_one_split(self, context):
        specs = evaluation_specs(context.scenes_of('test'), context.split, 'unseen', 4, 0, context.settings.world)
        assert all(context.split.split_of(s.target.class_id) == 'unseen' for s in specs)
        assert specs == evaluation_specs(context.scenes_of('test'), context.split, 'unseen', 4, 0,
                                         context.settings.world)

    def test_report_contents(self, context):
        learner = MetaLearner(context, PRESETS['full'], seed=0)
        digest = learner.store.digest()
        report = eval_splits(learner, context.scenes_of('test'), 2, (0, 1))
        assert learner.store.digest() == digest == report.checkpoint_digest
        for name in SPLIT_NAMES:
            s = report.splits[name]
            assert s['episodes'] == 4
            srs = [row['sr'] for row in report.per_seed[name]]
            assert s['sr_mean'] == pytest.approx(np.mean(srs))
            assert s['sr_std'] == pytest.approx(np.std(srs))
        assert report.isr is not None and 0.0 <= report.isr <= 1.0
        assert report.traces and {'seed', 'action', 'cls'} <= set(report.traces[0])

    def test_rerun_gives_identical_report(self, context):
        learner = MetaLearner(context, PRESETS['full'], seed=0)
        first = eval_splits(learner, context.scenes_of('test'), 1, (0,))
        second = eval_splits(learner, context.scenes_of('test'), 1, (0,))
        assert first.content_hash() == second.content_hash()
        assert first.input_hash == second.input_hash

    def test_report_round_trip(self, context):
        learner = MetaLearner(context, PRESETS['baseline'], seed=0)
        report = eval_splits(learner, context.scenes_of('test'), 1, (0,))
        assert RunReport.from_dict(report.to_dict()).content_hash() == report.content_hash()

    def test_no_seeds(self, context):
        with pytest.raises(EmptyResultsError):
            eval_splits(MetaLearner(context, PRESETS['baseline']), context.scenes_of('test'), 1, ())


class TestBaselinesAndAblations:

    def test_plain_baseline_needs_baseline_checkpoint(self, context):
        checkpoint = MetaLearner(context, PRESETS['full']).checkpoint()
        with pytest.raises(InvalidFlagsError):
            plain_baseline(context, checkpoint, context.scenes_of('test'), 1, (0,))

    def test_plain_baseline(self, context):
        checkpoint = MetaLearner(context, PRESETS['baseline']).checkpoint()
        report = plain_baseline(context, checkpoint, context.scenes_of('test'), 1, (0,))
        assert report.method == 'baseline'
        assert report.isr is None

    @pytest.mark.slow
    def test_gt_cls_shares_the_full_checkpoint(self, context):
        reports = run_ablation(context, ['full', 'gt_cls'], 1, (0,), train_episodes=2)
        assert reports['full'].checkpoint_digest == reports['gt_cls'].checkpoint_digest
        assert reports['gt_cls'].flags['use_gt_cls']

    @pytest.mark.slow
    def test_trained_agent_beats_random_on_unseen_targets(self, pretrained_perception):
        context = pretrained_perception(0).context
        e = context.settings.eval
        learner = MetaLearner(context, PRESETS['full'], seed=0)
        learner.train(TRAINING_EPISODES)
        trained = eval_splits(learner, context.scenes_of('test'), e.episodes_per_split, e.seeds)
        walker = evaluate_random(context.scenes_of('test'), context.split, context.settings,
                                 e.episodes_per_split, e.seeds)
        assert trained.splits['unseen']['sr_mean'] - walker.splits['unseen']['sr_mean'] >= 0.20


class TestTables:

    @pytest.fixture
    def reports(self, context):
        learner = MetaLearner(context, PRESETS['full'], seed=0)
        return {'full': eval_splits(learner, context.scenes_of('test'), 1, (0,))}

    def test_split_table(self, reports):
        header, rows = split_table(reports)
        assert header[0] == 'method' and len(header) == 1 + 4 * len(SPLIT_NAMES)
        assert rows[0][0] == 'full' and len(rows[0]) == len(header)

    def test_ablation_table_lists_flags(self, reports):
        header, rows = ablation_table(reports)
        assert 'use_mcfm' in header
        assert rows[0][header.index('use_mcfm')] == 1

    def test_stratum_tables(self, reports):
        header, rows = distance_table(reports)
        assert header == ['method', 'split', 'stratum', 'episodes', 'sr', 'spl']
        assert all(row[2] in ('L>=1', 'L>=5') for row in rows)
        _, rows = size_table(reports)
        assert all(row[2] in ('small', 'big') for row in rows)
