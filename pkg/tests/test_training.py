import json

import pytest
import torch

import hflic.training as training
from hflic.errors import ConfigurationError, TrainingDivergenceError
from hflic.losses import LossWeights, total_loss
from hflic.training import (
    Checkpoint,
    CropDataset,
    TrainConfig,
    TrainStage,
    desk_schedule,
    lr_schedule,
    paper_schedule,
    train_base,
    train_perceptual,
)
from tests.conftest import synthetic_image


class TestSchedule:
    def test_paper_preset_stage0(self):
        cfg = TrainConfig(schedule=paper_schedule())
        assert lr_schedule(cfg, 0) == 1e-4
        assert cfg.schedule[0].epochs == 500
        assert cfg.schedule[0].lam == 0.015

    def test_paper_preset_final_stage(self):
        cfg = TrainConfig(schedule=paper_schedule())
        assert lr_schedule(cfg, len(cfg.schedule) - 1) == 1e-6
        assert cfg.schedule[-1].epochs == 30

    def test_paper_ladder_lrs(self):
        stages = paper_schedule(warmup=False)
        assert [s.lr for s in stages] == [1e-4, 3e-5, 1e-5, 3e-6, 1e-6]
        assert [s.epochs for s in stages] == [100, 30, 30, 30, 30]

    def test_desk_preset_scales_epochs(self):
        paper = paper_schedule()
        desk = desk_schedule(100)
        assert [s.lr for s in desk] == [s.lr for s in paper]
        assert [s.epochs for s in desk] == [-(-s.epochs // 100) for s in paper]

    def test_out_of_range_stage(self):
        cfg = TrainConfig(schedule=desk_schedule())
        with pytest.raises(ConfigurationError):
            lr_schedule(cfg, len(cfg.schedule))

    def test_config_invariants(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(schedule=())
        with pytest.raises(ConfigurationError):
            TrainConfig(crop_size=48)
        with pytest.raises(ConfigurationError):
            TrainStage(epochs=0, lr=1e-4)


@pytest.fixture(scope="module")
def crops():
    return CropDataset([synthetic_image(i) for i in range(8)])


def short_cfg(**kw):
    defaults = dict(schedule=(TrainStage(15, 1e-4),), batch_size=4, seed=0, lam=0.015)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainBase:
    def test_smoke_reduces_loss_and_logs(self, crops, tmp_path):
        log_path = tmp_path / "log.jsonl"
        ckpt = train_base(crops, short_cfg(), log_path=log_path)
        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert len(records) == ckpt.step == 30
        losses = [r["loss"] for r in records]
        assert sum(losses[-10:]) / 10 < sum(losses[:10]) / 10
        assert {"step", "lr", "lambda", "loss", "bpp", "mse"} <= set(records[0])

    def test_seed_determinism_step1(self, crops):
        cfg = short_cfg(schedule=(TrainStage(1, 1e-4),))
        torch.manual_seed(777)  # must not matter
        a = train_base(crops, cfg)
        torch.manual_seed(31337)
        b = train_base(crops, cfg)
        x = synthetic_image(50, 64)
        assert torch.equal(a.model.reconstruct(x)[0], b.model.reconstruct(x)[0])

    def test_never_instantiates_discriminator(self, crops, monkeypatch):
        def boom(*a, **kw):
            raise AssertionError("discriminator built during base training")

        monkeypatch.setattr(training, "PatchDiscriminator", boom)
        train_base(crops, short_cfg(schedule=(TrainStage(1, 1e-4),)))

    def test_nan_aborts_with_term_name(self, crops, monkeypatch):
        def bad_mse(*a, **kw):
            return torch.tensor(float("nan"))

        monkeypatch.setattr(training.F, "mse_loss", bad_mse)
        with pytest.raises(TrainingDivergenceError) as err:
            train_base(crops, short_cfg(schedule=(TrainStage(1, 1e-4),)))
        assert err.value.term == "mse"

    def test_checkpoint_round_trip_bitwise(self, crops, tmp_path):
        ckpt = train_base(crops, short_cfg(schedule=(TrainStage(2, 1e-4),)))
        path = tmp_path / "model.ckpt"
        ckpt.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.step == ckpt.step
        x = synthetic_image(51, 64)
        assert torch.equal(ckpt.model.reconstruct(x)[0], loaded.model.reconstruct(x)[0])
        assert ckpt.model.model_id() == loaded.model.model_id()


class TestTrainPerceptual:
    def test_runs_without_discriminator_when_adv_zero(self, crops, monkeypatch, tmp_path):
        base = train_base(crops, short_cfg(schedule=(TrainStage(1, 1e-4),)))

        def boom(*a, **kw):
            raise AssertionError("discriminator built with w_adv=0")

        monkeypatch.setattr(training, "PatchDiscriminator", boom)
        weights = LossWeights(w_adv=0.0, lambda_rate=0.06)
        cfg = short_cfg(phase="perceptual", weights=weights, schedule=(TrainStage(2, 1e-4),))
        log_path = tmp_path / "perc.jsonl"
        ckpt = train_perceptual(base, crops, cfg, log_path=log_path)
        assert ckpt.discriminator is None
        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert records and records[0]["adv"] == 0.0

    def test_adversarial_steps_update_discriminator_only_in_d_phase(self, crops):
        base = train_base(crops, short_cfg(schedule=(TrainStage(1, 1e-4),)))
        weights = LossWeights(w_adv=0.01, w_sty=1.0, lambda_rate=0.06)
        cfg = short_cfg(phase="perceptual", weights=weights, schedule=(TrainStage(2, 1e-4),))
        ckpt = train_perceptual(base, crops, cfg)
        assert ckpt.discriminator is not None

    def test_discriminator_learns_real_vs_fake(self, crops):
        base = train_base(crops, short_cfg(schedule=(TrainStage(2, 1e-4),)))
        weights = LossWeights(w_adv=0.01, lambda_rate=0.06)
        cfg = short_cfg(phase="perceptual", weights=weights, schedule=(TrainStage(40, 1e-4),))
        ckpt = train_perceptual(base, crops, cfg)
        disc = ckpt.discriminator
        gen = torch.Generator().manual_seed(5)
        correct = total = 0
        with torch.no_grad():
            for i in range(4):
                x, _ = crops.sample_batch(2, 64, gen)
                out = ckpt.model.forward_train(x)
                cond = out["y_hat"]
                real = disc(x, cond)
                fake = disc(out["x_hat"], cond)
                correct += int((real > 0).sum()) + int((fake < 0).sum())
                total += real.numel() + fake.numel()
        assert correct / total > 0.5

    def test_alternation_isolates_parameter_updates(self, crops):
        """Generator steps leave the discriminator untouched and vice versa.

        Mirrors the optimizer partitioning of train_perceptual on one step.
        """
        from hflic.losses import FeatureExtractor, PatchDiscriminator, hinge_d

        base = train_base(crops, short_cfg(schedule=(TrainStage(1, 1e-4),)))
        model = base.model
        model.train()
        disc = PatchDiscriminator(model.cfg.m_channels)
        fx = FeatureExtractor()
        opt_g = torch.optim.Adam(model.parameters(), lr=1e-3)
        opt_d = torch.optim.Adam(disc.parameters(), lr=1e-3)
        gen = torch.Generator().manual_seed(0)
        x, face = crops.sample_batch(2, 64, gen)
        weights = LossWeights(w_adv=0.01, lambda_rate=0.06)

        out = model.forward_train(x)
        cond = out["y_hat"].detach()
        fake_logits = disc(out["x_hat"], cond)
        loss, _ = total_loss(
            x, out["x_hat"], out["y_bits"] + out["z_bits"], face, weights, fx,
            fake_logits=fake_logits,
        )
        disc_before = {k: v.clone() for k, v in disc.state_dict().items()}
        opt_g.zero_grad()
        opt_d.zero_grad()
        loss.backward()
        opt_g.step()
        for key, value in disc_before.items():
            assert torch.equal(value, disc.state_dict()[key]), key

        codec_before = {k: v.clone() for k, v in model.state_dict().items()}
        opt_d.zero_grad()
        d_loss = hinge_d(disc(x, cond), disc(out["x_hat"].detach(), cond))
        d_loss.backward()
        opt_d.step()
        for key, value in codec_before.items():
            assert torch.equal(value, model.state_dict()[key]), key

    def test_freeze_entropy_flag(self, crops):
        base = train_base(crops, short_cfg(schedule=(TrainStage(1, 1e-4),)))
        before = {
            k: v.clone() for k, v in base.model.context.state_dict().items()
        }
        weights = LossWeights(w_adv=0.0, lambda_rate=0.06)
        cfg = short_cfg(
            phase="perceptual",
            weights=weights,
            schedule=(TrainStage(2, 1e-4),),
            freeze_entropy=True,
        )
        ckpt = train_perceptual(base, crops, cfg)
        after = ckpt.model.context.state_dict()
        for key, value in before.items():
            assert torch.equal(value, after[key]), key


class TestCropDataset:
    def test_from_dir_and_detections(self, tmp_path):
        import numpy as np
        from PIL import Image

        for i in range(2):
            arr = (synthetic_image(i, 96).permute(1, 2, 0).numpy() * 255).astype("uint8")
            Image.fromarray(arr).save(tmp_path / f"img{i}.png")
        # 12x12 box in a 96x96 image: 1.56% of the area, under the 2.5% cap.
        det = [{"image": "img0.png", "boxes": [[10, 10, 22, 22, 0.9]]}]
        det_path = tmp_path / "det.json"
        det_path.write_text(json.dumps(det))
        ds = CropDataset.from_dir(tmp_path, det_path)
        assert len(ds) == 2
        assert float(ds.face_masks[0].sum()) > 0
        assert float(ds.face_masks[1].sum()) == 0
        x, m = ds.sample_batch(3, 64, torch.Generator().manual_seed(0))
        assert x.shape == (3, 3, 64, 64) and m.shape == (3, 1, 64, 64)

    def test_too_small_image_rejected(self):
        ds = CropDataset([torch.rand(3, 32, 32)])
        with pytest.raises(ConfigurationError):
            ds.sample_batch(1, 64, torch.Generator())
