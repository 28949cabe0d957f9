"""Streaming engine: staging, micro steps, advances, schedules, dumps.

The analytic velocity (x1 - x) / (1 - tau) is the workhorse oracle here:
its Euler iterates have closed forms, and its final step lands exactly on
the target no matter what schedule preceded it.
"""

import numpy as np
import pytest

from bufferflow import flowcore, streamer
from bufferflow.partition import (
    PartitionScheme,
    PowerGamma,
    blockwise_scheme,
    diagonal_scheme,
    staged_taus,
    uniform_scheme,
)
from bufferflow.streamer import StreamSession


SHAPE = (1, 6, 6)


def constant_clip(value: float, frames: int) -> np.ndarray:
    return np.full((frames,) + SHAPE, value, dtype=np.float64)


def target_clip(frames: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((frames,) + SHAPE)


SCHEME_MATRIX = [
    uniform_scheme(8, 8),
    diagonal_scheme(8, 8),
    blockwise_scheme(8, 8, 2),
    PartitionScheme(K=2, N=3, c=2, s=4),
]


class TestStaging:
    def test_t2v_cache_states_match_closed_form(self):
        # Uniform warm-up under the analytic field: state k is exactly the
        # straight-line interpolant (k/T) x1 + (1 - k/T) x0.
        scheme = diagonal_scheme(4, 8)
        x1 = target_clip(4, seed=1)
        rng = np.random.default_rng(42)
        buf = streamer.init_from_t2v_cache(
            flowcore.make_target_oracle(x1), scheme, SHAPE, cond=0, rng=rng
        )
        x0 = np.random.default_rng(42).standard_normal((4,) + SHAPE)
        T = scheme.steps_per_frame
        for j in range(1, scheme.N + 1):
            level = (scheme.N - j) / scheme.N
            k = scheme.s * (scheme.N - j)
            expected = (k / T) * x1 + (1 - k / T) * x0
            pos = scheme.K + (j - 1) * scheme.c
            assert np.allclose(buf.frames[pos], expected[pos], atol=1e-9)
            assert buf.tau[pos] == pytest.approx(level, abs=1e-12)

    def test_single_chunk_no_references_is_pure_noise(self):
        scheme = uniform_scheme(8, 8)
        calls = []

        def spy(x, tau, cond, idx=None):
            calls.append(1)
            return np.zeros_like(x)

        rng = np.random.default_rng(3)
        buf = streamer.init_from_t2v_cache(spy, scheme, SHAPE, cond=0, rng=rng)
        assert not calls  # degenerate staging needs no generation
        assert np.all(buf.tau == 0.0)
        ref = np.random.default_rng(3).standard_normal((8,) + SHAPE)
        assert np.array_equal(buf.frames, ref)

    @pytest.mark.parametrize("scheme", SCHEME_MATRIX)
    def test_staged_buffer_satisfies_invariants(self, scheme):
        x1 = target_clip(scheme.buffer_size)
        buf = streamer.init_from_t2v_cache(
            flowcore.make_target_oracle(x1), scheme, SHAPE,
            cond=0, rng=np.random.default_rng(0),
        )
        streamer.check_buffer(buf)  # raises on violation
        assert np.array_equal(buf.tau, staged_taus(scheme, 0))

    def test_video_init_matches_staged_grid(self):
        scheme = blockwise_scheme(8, 8, 2)
        video = target_clip(10, seed=5)
        buf = streamer.init_from_video(video, scheme, strength=1.0, rng=np.random.default_rng(0))
        assert np.array_equal(buf.tau, staged_taus(scheme, 0))

    def test_video_init_low_strength_keeps_input(self):
        scheme = blockwise_scheme(8, 8, 2)
        video = target_clip(8, seed=6)
        buf = streamer.init_from_video(
            video, scheme, strength=1e-9, rng=np.random.default_rng(0), sigma_min=0.0
        )
        assert np.allclose(buf.frames, video, atol=1e-6)

    def test_video_init_full_strength_entry_is_fresh_noise_stats(self):
        # With strength 1 the uniform scheme stages everything at level 0:
        # statistics should look like a fresh standard normal draw.
        scheme = uniform_scheme(16, 4)
        rng = np.random.default_rng(7)
        video = rng.standard_normal((16,) + SHAPE)
        buf = streamer.init_from_video(video, scheme, strength=1.0, rng=np.random.default_rng(8))
        n = buf.frames.size
        assert abs(buf.frames.mean()) < 3.0 / np.sqrt(n)
        assert abs(buf.frames.std() - 1.0) < 3.0 / np.sqrt(2 * n)

    def test_video_init_validation(self):
        scheme = uniform_scheme(8, 8)
        video = target_clip(4)
        with pytest.raises(ValueError):
            streamer.init_from_video(video, scheme, strength=1.0, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            streamer.init_from_video(target_clip(8), scheme, strength=0.0, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            streamer.init_from_video(target_clip(8), scheme, strength=1.5, rng=np.random.default_rng(0))


class TestMicroStepAndAdvance:
    def test_tau_advances_by_one_over_t(self):
        scheme = blockwise_scheme(8, 16, 2)
        x1 = target_clip(8)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        before = session.buf.tau.copy()
        session.micro_step()
        after = session.buf.tau
        assert np.allclose(after - before, 1.0 / scheme.steps_per_frame, atol=1e-12)

    def test_references_never_move(self):
        scheme = PartitionScheme(K=2, N=3, c=2, s=4)
        x1 = target_clip(scheme.buffer_size)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        refs_before = session.buf.frames[:2].copy()
        for _ in range(3):
            session.micro_step()
        assert np.array_equal(session.buf.frames[:2], refs_before)
        assert np.all(session.buf.tau[:2] == 1.0)

    def test_cfg_one_does_single_forward(self):
        scheme = uniform_scheme(4, 4)
        conds_seen = []

        def spy(x, tau, cond, idx=None):
            conds_seen.append(cond)
            return np.zeros_like(x)

        session = StreamSession(spy, scheme, SHAPE, schedule=1, cfg_w=1.0)
        session.micro_step()
        assert conds_seen == [1]

    def test_cfg_two_adds_null_forward(self):
        scheme = uniform_scheme(4, 4)
        conds_seen = []

        def spy(x, tau, cond, idx=None):
            conds_seen.append(cond)
            return np.full_like(x, float(cond))

        session = StreamSession(spy, scheme, SHAPE, schedule=2, cfg_w=3.0)
        session.micro_step()
        assert conds_seen == [2, 0]

    def test_exit_chunk_climbs_to_one_and_pops(self):
        scheme = blockwise_scheme(8, 8, 2)  # N=4, s=2
        x1 = target_clip(8)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        assert session.buf.tau[0] == pytest.approx(3 / 4)
        out = session.step()
        assert out is None
        chunk = session.step()
        assert chunk is not None
        assert chunk.start_index == 0
        assert chunk.index_range == (0, 2)
        assert np.allclose(chunk.frames, x1[:2], atol=1e-9)

    def test_advance_requires_finished_round(self):
        scheme = uniform_scheme(4, 4)
        x1 = target_clip(4)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        with pytest.raises(ValueError):
            streamer.advance(session.buf, session.rng)

    def test_diagonal_advance_restores_staircase(self):
        scheme = diagonal_scheme(4, 4)
        x1 = target_clip(4)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        chunk = session.step()
        assert chunk is not None  # s=1: every micro step completes a round
        assert np.array_equal(session.buf.tau, np.array([0.75, 0.5, 0.25, 0.0]))

    def test_reference_refresh_takes_popped_tail(self):
        scheme = PartitionScheme(K=2, N=2, c=2, s=1)
        x1 = target_clip(scheme.buffer_size)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        chunk = session.step()
        assert chunk is not None
        assert np.array_equal(session.buf.frames[:2], chunk.frames[-2:])

    def test_reference_refresh_spans_old_refs_when_chunk_small(self):
        # K=3 > c=2: the refreshed references are (old_ref_tail, whole chunk).
        scheme = PartitionScheme(K=3, N=2, c=2, s=1)
        x1 = target_clip(scheme.buffer_size)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        old_refs = session.buf.frames[:3].copy()
        chunk = session.step()
        refs = session.buf.frames[:3]
        assert np.array_equal(refs[0], old_refs[2])
        assert np.array_equal(refs[1:], chunk.frames)

    def test_grid_invariant_all_micro_steps(self):
        for scheme in SCHEME_MATRIX:
            x1 = target_clip(scheme.buffer_size)
            session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
            for _ in range(3 * scheme.s):
                session.step()
                streamer.check_buffer(session.buf)
                expected = staged_taus(scheme, session.buf.m)
                assert np.abs(session.buf.tau - expected).max() <= streamer.GRID_TOL


class TestStreamRuns:
    @pytest.mark.parametrize("scheme", SCHEME_MATRIX)
    def test_pops_equal_target(self, scheme):
        x1 = target_clip(scheme.buffer_size, seed=2)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        frames = list(streamer.stream_frames(session, 10 * scheme.c))
        exit_slice = x1[scheme.K : scheme.K + scheme.c]
        for i in range(0, len(frames), scheme.c):
            got = np.stack(frames[i : i + scheme.c])
            assert np.allclose(got, exit_slice, atol=1e-6)

    def test_scheme_equivalence_on_constant_target(self):
        # With a frame-constant target every scheme emits the identical
        # clean stream: the partitions differ only in bookkeeping.
        x1 = constant_clip(0.625, 8)
        outs = []
        for scheme in (uniform_scheme(8, 8), diagonal_scheme(8, 8), blockwise_scheme(8, 8, 2)):
            frames = list(
                streamer.run_stream(
                    flowcore.make_target_oracle(x1), scheme, 0, n_frames=16, seed=9, frame_shape=SHAPE
                )
            )
            outs.append(np.stack(frames))
        assert np.allclose(outs[0], outs[1], atol=1e-6)
        assert np.allclose(outs[0], outs[2], atol=1e-6)
        assert np.allclose(outs[0], 0.625, atol=1e-6)

    def test_forward_count_formula(self):
        # T warm-up forwards plus s per chunk; the degenerate single-chunk
        # scheme skips warm-up entirely.
        for scheme, warm in [
            (blockwise_scheme(8, 8, 2), 8),
            (diagonal_scheme(8, 8), 8),
            (PartitionScheme(K=2, N=3, c=2, s=4), 12),
            (uniform_scheme(8, 8), 0),
        ]:
            x1 = target_clip(scheme.buffer_size)
            session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
            n = 3 * scheme.c
            list(streamer.stream_frames(session, n))
            rounds = -(-n // scheme.c)
            assert session.forward_count == warm + rounds * scheme.s

    def test_forward_count_doubles_with_guidance(self):
        scheme = blockwise_scheme(8, 8, 2)
        x1 = target_clip(8)
        oracle = flowcore.make_conditional_oracle({0: np.zeros_like(x1), 1: x1})
        session = StreamSession(oracle, scheme, SHAPE, schedule=1, cfg_w=2.0)
        list(streamer.stream_frames(session, 4))
        warm, rounds = scheme.steps_per_frame, 2
        assert session.forward_count == 2 * (warm + rounds * scheme.s)

    def test_warm_up_cost_first_pop_after_s_steps(self):
        scheme = blockwise_scheme(8, 8, 2)
        x1 = target_clip(8)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        pops = 0
        for i in range(scheme.s):
            if session.step() is not None:
                pops += 1
        assert pops == 1
        assert session.micro_steps_done == scheme.s

    def test_noise_conservation(self):
        scheme = PartitionScheme(K=2, N=3, c=2, s=2)
        x1 = target_clip(scheme.buffer_size)
        session = StreamSession(flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0)
        list(streamer.stream_frames(session, 12))
        assert session.noise_pushed == session.buf.frames_emitted

    def test_exact_frame_count_even_when_c_does_not_divide(self):
        scheme = blockwise_scheme(8, 8, 4)
        x1 = target_clip(8)
        frames = list(
            streamer.run_stream(flowcore.make_target_oracle(x1), scheme, 0, n_frames=10, frame_shape=SHAPE)
        )
        assert len(frames) == 10

    def test_deterministic_given_seed(self):
        scheme = blockwise_scheme(8, 8, 2)
        x1 = target_clip(8)
        a = np.stack(list(streamer.run_stream(flowcore.make_target_oracle(x1), scheme, 0, 12, seed=4, frame_shape=SHAPE)))
        b = np.stack(list(streamer.run_stream(flowcore.make_target_oracle(x1), scheme, 0, 12, seed=4, frame_shape=SHAPE)))
        c = np.stack(list(streamer.run_stream(flowcore.make_target_oracle(x1), scheme, 0, 12, seed=5, frame_shape=SHAPE)))
        assert np.array_equal(a, b)
        assert a.shape == c.shape  # different seed differs only via noise draw
        assert not np.array_equal(a, c) or np.allclose(a, c, atol=1e-6)


class TestSchedules:
    def test_validation(self):
        x1 = target_clip(4)
        fn = flowcore.make_target_oracle(x1)
        scheme = uniform_scheme(4, 4)
        with pytest.raises(ValueError):
            StreamSession(fn, scheme, SHAPE, schedule=[(4, 1)])  # must start at 0
        with pytest.raises(ValueError):
            StreamSession(fn, scheme, SHAPE, schedule=[(0, 1), (8, 2), (8, 3)])

    def test_condition_switch_steers_stream(self):
        scheme = diagonal_scheme(4, 4)
        a = constant_clip(0.25, 4)
        b = constant_clip(0.75, 4)
        oracle = flowcore.make_conditional_oracle({1: a, 2: b})
        frames = np.stack(
            list(streamer.run_stream(oracle, scheme, [(0, 1), (6, 2)], n_frames=16, seed=0, frame_shape=SHAPE))
        )
        # pops 0..5 completed under condition 1; later pops land on b
        assert np.allclose(frames[:6], 0.25, atol=1e-6)
        assert np.allclose(frames[8:], 0.75, atol=1e-6)
        # transition pops stay inside the segment between the two targets
        assert frames.min() >= 0.25 - 1e-6 and frames.max() <= 0.75 + 1e-6

    def test_injected_condition_applies_next_micro_step(self):
        scheme = diagonal_scheme(4, 4)
        a = constant_clip(0.0, 4)
        b = constant_clip(1.0, 4)
        oracle = flowcore.make_conditional_oracle({1: a, 2: b})
        session = StreamSession(oracle, scheme, SHAPE, schedule=1)
        micro, emitted = session.set_condition(2)
        assert (micro, emitted) == (session.micro_steps_done, 0)
        chunk = session.step()
        assert chunk is not None
        assert chunk.cond == 2
        assert np.allclose(chunk.frames, 1.0, atol=1e-6)


class TestChunkExtension:
    def test_extension_counts_and_exactness(self):
        B, T, K = 8, 8, 3
        x1 = target_clip(B, seed=3)
        fn = flowcore.make_target_oracle(x1)
        for n_ext in (0, 2):
            out = streamer.chunk_extension_mode(
                fn, B, T, cond=0, ref_count=K, n_extensions=n_ext, frame_shape=SHAPE
            )
            assert out.shape[0] == (1 + n_ext) * (B - K)
            for r in range(1 + n_ext):
                got = out[r * (B - K) : (r + 1) * (B - K)]
                assert np.allclose(got, x1[K:], atol=1e-6)

    def test_extension_validation(self):
        x1 = target_clip(4)
        fn = flowcore.make_target_oracle(x1)
        with pytest.raises(ValueError):
            streamer.chunk_extension_mode(
                fn, 4, 4, cond=0, ref_count=0, n_extensions=1, frame_shape=SHAPE
            )
        with pytest.raises(ValueError):
            streamer.chunk_extension_mode(
                fn, 4, 4, cond=0, ref_count=4, n_extensions=1, frame_shape=SHAPE
            )


class TestGammaStaging:
    def test_warped_grid_and_pops(self):
        scheme = blockwise_scheme(8, 8, 2)
        gamma = PowerGamma(2.0)
        x1 = target_clip(8)
        session = StreamSession(
            flowcore.make_target_oracle(x1), scheme, SHAPE, schedule=0, gamma=gamma
        )
        assert np.array_equal(session.buf.tau, staged_taus(scheme, 0, gamma))
        frames = list(streamer.stream_frames(session, 8))
        assert np.allclose(np.stack(frames[:2]), x1[:2], atol=1e-6)
        streamer.check_buffer(session.buf)


class TestDumps:
    def test_round_trip_and_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = rng.uniform(0, 1, size=(20, 1, 16, 16))
        path = tmp_path / "run.sdfs"
        manifest = streamer.write_stream_dump(iter(frames), path, {"seed": 7}, stream_id=3)
        assert manifest["frames"] == 20
        assert manifest["clamped_pixels"] == 0
        got, indices, loaded = streamer.read_stream_dump(path)
        assert loaded["seed"] == 7
        assert np.array_equal(indices, np.arange(20))
        assert np.abs(got - frames).max() <= 1.0 / 510 + 1e-12

    def test_clamp_diagnostic(self, tmp_path):
        frames = np.stack([np.full((1, 4, 4), 2.0), np.full((1, 4, 4), 0.5)])
        manifest = streamer.write_stream_dump(iter(frames), tmp_path / "x.sdfs", {})
        assert manifest["clamped_pixels"] == 16

    def test_dump_reproducible_from_manifest_settings(self, tmp_path):
        scheme = blockwise_scheme(8, 8, 2)
        x1 = target_clip(8, seed=11)
        fn = flowcore.make_target_oracle(x1)

        def produce(path):
            frames = streamer.run_stream(fn, scheme, [(0, 0)], n_frames=12, seed=21, frame_shape=SHAPE)
            return streamer.write_stream_dump(frames, path, {"seed": 21})

        produce(tmp_path / "a.sdfs")
        produce(tmp_path / "b.sdfs")
        assert (tmp_path / "a.sdfs").read_bytes() == (tmp_path / "b.sdfs").read_bytes()
