import numpy as np
import pytest

from ttastream.domain import DiscriminatorModel
from ttastream.fusion import fuse_ensemble
from ttastream.imaging import Image
from ttastream.mean_teacher import AdaptState, MtConfig, ParamVector
from ttastream.pipeline import (
    ChannelRoles,
    EnsembleSchedule,
    PipelineConfig,
    PipelineError,
    process_frame,
    run_stream,
    schedule_weights,
)
from ttastream.synth import (
    SynthConfig,
    apply_domain,
    benchmark_channels,
    day_scene,
    generate_synthetic_stream,
)
from ttastream.formats import ChannelEntry, parse_manifest

from conftest import make_det


def luminance_router():
    """Hand-built discriminator: night iff mean luminance below ~0.45."""
    return DiscriminatorModel(
        weights=np.array([-10.0, 0.0, 0.0, 0.0]),
        bias=0.0,
        feature_means=np.array([0.45, 0.0, 0.0, 0.0]),
        feature_stds=np.ones(4),
    )


def roles4():
    return ChannelRoles(
        source="source", multi_domain="multi_domain", auxiliary=("auxiliary",), night="night"
    )


def channel_dets(score=0.9):
    det = lambda chan: [make_det(10, 10, 30, 30, score, channel=chan)]  # noqa: E731
    return {
        "source": det("source"),
        "multi_domain": det("multi_domain"),
        "auxiliary": det("auxiliary"),
        "night": det("night"),
    }


def fresh_state(classes=2, seed=0):
    return AdaptState.fresh(ParamVector.identity(classes), seed)


class TestScheduleWeights:
    SCHED = EnsembleSchedule(initial_source_weight=0.3, ramp_frames=1000)

    def test_frame_zero(self):
        w = schedule_weights(0, self.SCHED)
        assert w["source"] == pytest.approx(0.3)
        assert w["multi_domain"] == 1.0 and w["auxiliary"] == 1.0

    def test_ramp_endpoint_exact(self):
        assert schedule_weights(1000, self.SCHED)["source"] == 1.0
        assert schedule_weights(5000, self.SCHED)["source"] == 1.0

    def test_midpoint(self):
        assert schedule_weights(500, self.SCHED)["source"] == pytest.approx(0.65)

    def test_non_decreasing(self):
        values = [schedule_weights(i, self.SCHED)["source"] for i in range(0, 1200, 7)]
        assert values == sorted(values)
        sched = EnsembleSchedule(initial_source_weight=0.123, ramp_frames=37)
        assert schedule_weights(37, sched)["source"] == 1.0


class TestProcessFrame:
    CFG = PipelineConfig()

    def night_image(self):
        rng = np.random.default_rng(0)
        img, _ = day_scene(rng, 48, 32, 3, 2)
        return apply_domain(img, "night")

    def day_image(self):
        rng = np.random.default_rng(0)
        img, _ = day_scene(rng, 48, 32, 3, 2)
        return img

    def test_dark_frame_routes_to_night_channel(self):
        result = process_frame(
            self.night_image(), channel_dets(), "f0", 0, roles4(),
            fresh_state(), luminance_router(), self.CFG,
        )
        assert result.route == "night"
        assert result.domain.value == "night"
        assert result.adapt_loss is None
        assert result.weights == {"night": 1.0}
        expected = fuse_ensemble(
            [(channel_dets()["night"], 1.0)], self.CFG.soft_nms,
            self.CFG.support_iou, self.CFG.min_support,
        )
        assert result.detections == expected

    def test_bright_frame_takes_ensemble_path(self):
        result = process_frame(
            self.day_image(), channel_dets(), "f0", 0, roles4(),
            fresh_state(), luminance_router(), self.CFG,
        )
        assert result.route == "ensemble"
        assert result.adapt_loss == 0.0  # student == teacher at the source point
        assert result.weights == {
            "source": pytest.approx(0.3),
            "multi_domain": 1.0,
            "auxiliary": 1.0,
        }
        assert all(d.channel_id != "night" for d in result.detections)

    def test_night_routing_disabled_forces_ensemble(self):
        cfg = PipelineConfig(night_routing=False)
        result = process_frame(
            self.night_image(), channel_dets(), "f0", 0, roles4(),
            fresh_state(), luminance_router(), cfg,
        )
        assert result.route == "ensemble"
        assert result.domain.value == "night"  # decision still recorded

    def test_missing_channel_named_in_error(self):
        dets = channel_dets()
        del dets["auxiliary"]
        with pytest.raises(PipelineError, match="auxiliary.*f7"):
            process_frame(
                self.day_image(), dets, "f7", 0, roles4(),
                fresh_state(), luminance_router(), self.CFG,
            )

    def test_visibility_flag_recorded(self):
        foggy = Image.full(48, 32, (0.75, 0.75, 0.75))
        result = process_frame(
            foggy, channel_dets(), "f0", 0, roles4(),
            fresh_state(), luminance_router(), self.CFG,
        )
        assert result.visibility_applied

    def test_permutation_invariant_without_adaptation(self):
        cfg = PipelineConfig(
            mt=MtConfig(lr=0.0, restore_p=0.0),
            schedule=EnsembleSchedule(initial_source_weight=1.0, ramp_frames=1),
        )
        rng = np.random.default_rng(5)
        frames = []
        for i in range(6):
            img, _ = day_scene(rng, 48, 32, 3, 2)
            if i % 2:
                img = apply_domain(img, "night")
            frames.append((f"f{i}", img, channel_dets(score=float(rng.uniform(0.4, 1.0)))))

        def run_order(order):
            state = fresh_state()
            out = {}
            for pos, k in enumerate(order):
                fid, img, dets = frames[k]
                r = process_frame(
                    img, dets, fid, pos, roles4(), state, luminance_router(), cfg
                )
                out[fid] = r.to_json_dict()
            return out

        forward = run_order(range(6))
        shuffled = run_order([3, 0, 5, 1, 4, 2])
        assert forward == shuffled


class TestChannelRoles:
    def test_resolution(self):
        entries = [
            ChannelEntry("s", "source"),
            ChannelEntry("m", "multi_domain"),
            ChannelEntry("a1", "auxiliary"),
            ChannelEntry("n", "night"),
        ]
        roles = ChannelRoles.from_entries(entries, night_required=True)
        assert roles.source == "s" and roles.night == "n"
        assert roles.auxiliary == ("a1",)

    def test_night_required(self):
        entries = [ChannelEntry("s", "source"), ChannelEntry("m", "multi_domain")]
        with pytest.raises(PipelineError, match="night"):
            ChannelRoles.from_entries(entries, night_required=True)
        roles = ChannelRoles.from_entries(entries, night_required=False)
        assert roles.night is None

    def test_duplicate_source_rejected(self):
        entries = [
            ChannelEntry("s1", "source"),
            ChannelEntry("s2", "source"),
            ChannelEntry("m", "multi_domain"),
        ]
        with pytest.raises(PipelineError):
            ChannelRoles.from_entries(entries, night_required=False)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_stream")
    cfg = SynthConfig(
        seed=77,
        timeline=[("day", 6), ("night", 6), ("fog", 3), ("day", 3)],
        channels=benchmark_channels(),
        width=64,
        height=48,
        objects_per_frame=4,
    )
    generate_synthetic_stream(cfg, out)
    return out


@pytest.fixture(scope="module")
def router_model(small_corpus):
    return luminance_router()


class TestRunStream:
    def test_results_align_with_manifest(self, small_corpus, router_model):
        manifest = parse_manifest(small_corpus / "manifest.json")
        results, report = run_stream(manifest, PipelineConfig(), router_model)
        assert [r.frame_id for r in results] == [f.frame_id for f in manifest.frames]
        assert report is not None
        assert 0.0 <= report.map_5095 <= 1.0
        routes = {r.route for r in results}
        assert routes <= {"night", "ensemble"}
        n_night = sum(r.route == "night" for r in results)
        assert n_night + sum(r.route == "ensemble" for r in results) == len(results)
        # the synthetic night segment is dark enough to route
        assert n_night >= 6

    def test_deterministic_given_seed(self, small_corpus, router_model):
        manifest = parse_manifest(small_corpus / "manifest.json")
        cfg = PipelineConfig(seed=123)
        a_results, a_report = run_stream(manifest, cfg, router_model)
        b_results, b_report = run_stream(manifest, cfg, router_model)
        assert [r.to_json_dict() for r in a_results] == [r.to_json_dict() for r in b_results]
        assert a_report.to_json_dict() == b_report.to_json_dict()

    def test_frame_result_schema(self, small_corpus, router_model):
        manifest = parse_manifest(small_corpus / "manifest.json")
        results, _ = run_stream(manifest, PipelineConfig(), router_model)
        blob = results[0].to_json_dict()
        assert set(blob) == {
            "frame_id", "route", "domain", "domain_p", "visibility_applied",
            "weights", "adapt_loss", "detections",
        }

    def test_empty_manifest(self, tmp_path, router_model):
        (tmp_path / "manifest.json").write_text(
            '{"classes": 2, "channels": ['
            '{"channel_id": "source", "role": "source"},'
            '{"channel_id": "multi_domain", "role": "multi_domain"},'
            '{"channel_id": "night", "role": "night"}], "frames": []}'
        )
        manifest = parse_manifest(tmp_path / "manifest.json")
        results, report = run_stream(manifest, PipelineConfig(), router_model)
        assert results == []
        assert report is None

    def test_output_invariant_to_ema_alpha_without_adaptation(
        self, small_corpus, router_model
    ):
        manifest = parse_manifest(small_corpus / "manifest.json")
        frozen = dict(lr=0.0, restore_p=0.0)
        slow, _ = run_stream(
            manifest, PipelineConfig(mt=MtConfig(ema_alpha=0.0001, **frozen)), router_model
        )
        fast, _ = run_stream(
            manifest, PipelineConfig(mt=MtConfig(ema_alpha=0.9, **frozen)), router_model
        )
        assert [r.to_json_dict() for r in slow] == [r.to_json_dict() for r in fast]
