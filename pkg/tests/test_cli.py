import json

import numpy as np
import pytest
import torch
from PIL import Image

from hflic.cli import (
    EXIT_CORRUPT,
    EXIT_INPUT,
    EXIT_MODEL_MISMATCH,
    EXIT_OK,
    CliError,
    load_run_config,
    main,
)
from hflic.model import build_model, save_checkpoint
from hflic.transforms import TransformConfig
from tests.conftest import synthetic_image


def save_png(path, image):
    arr = (image.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    torch.manual_seed(0)
    save_checkpoint(path, build_model(TransformConfig()))
    return path


@pytest.fixture(scope="module")
def png_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pngs")
    for i in range(2):
        save_png(d / f"img{i}.png", synthetic_image(i, 128))
    return d


class TestConfig:
    def test_defaults_load(self):
        cfg = load_run_config(None)
        assert cfg["model"]["m_channels"] == 48

    def test_file_merge_and_overrides(self, tmp_path):
        p = tmp_path / "cfg.yaml"
        p.write_text("model:\n  m_channels: 64\ntraining:\n  seed: 5\n")
        cfg = load_run_config(str(p), ["training.batch_size=2"])
        assert cfg["model"]["m_channels"] == 64
        assert cfg["training"]["seed"] == 5
        assert cfg["training"]["batch_size"] == 2

    def test_unknown_keys_rejected(self, tmp_path):
        p = tmp_path / "cfg.yaml"
        p.write_text("modle:\n  m_channels: 64\n")
        with pytest.raises(CliError):
            load_run_config(str(p))
        with pytest.raises(CliError):
            load_run_config(None, ["training.warp_speed=9"])


class TestCompressDecompress:
    def test_round_trip_preserves_dimensions(self, ckpt_path, png_dir, tmp_path):
        out_c = tmp_path / "compressed"
        code = main(
            ["compress", str(png_dir), "--checkpoint", str(ckpt_path), "--out", str(out_c)]
        )
        assert code == EXIT_OK
        hflc_files = sorted(out_c.glob("*.hflc"))
        assert len(hflc_files) == 2
        assert (out_c / "bpp.jsonl").exists()

        out_d = tmp_path / "decoded"
        code = main(
            ["decompress", str(out_c), "--checkpoint", str(ckpt_path), "--out", str(out_d)]
        )
        assert code == EXIT_OK
        for i in range(2):
            with Image.open(out_d / f"img{i}.png") as im:
                assert im.size == (128, 128)

    def test_missing_checkpoint_exit_2(self, png_dir, tmp_path):
        code = main(
            [
                "compress",
                str(png_dir),
                "--checkpoint",
                str(tmp_path / "missing.ckpt"),
                "--out",
                str(tmp_path / "o"),
            ]
        )
        assert code == EXIT_INPUT

    def test_wrong_model_exit_3(self, ckpt_path, png_dir, tmp_path):
        out_c = tmp_path / "c"
        main(["compress", str(png_dir), "--checkpoint", str(ckpt_path), "--out", str(out_c)])
        other = tmp_path / "other.ckpt"
        torch.manual_seed(99)
        save_checkpoint(other, build_model(TransformConfig()))
        code = main(
            ["decompress", str(out_c), "--checkpoint", str(other), "--out", str(tmp_path / "d")]
        )
        assert code == EXIT_MODEL_MISMATCH

    def test_corrupted_payload_exit_4(self, ckpt_path, png_dir, tmp_path, capsys):
        out_c = tmp_path / "c"
        main(["compress", str(png_dir), "--checkpoint", str(ckpt_path), "--out", str(out_c)])
        target = sorted(out_c.glob("*.hflc"))[0]
        data = bytearray(target.read_bytes())
        data[-10] ^= 0xFF  # inside the last payload
        data = data[:-6]  # and drop its tail
        target.write_bytes(bytes(data))
        code = main(
            ["decompress", str(target), "--checkpoint", str(ckpt_path), "--out", str(tmp_path / "d")]
        )
        assert code == EXIT_CORRUPT


class TestTrainEvalBench:
    def test_train_writes_checkpoint(self, png_dir, tmp_path):
        out = tmp_path / "train"
        code = main(
            [
                "train",
                "--data",
                str(png_dir),
                "--out",
                str(out),
                "--set",
                "training.schedule=[[2, 0.0001]]",
                "--set",
                "training.batch_size=2",
            ]
        )
        assert code == EXIT_OK
        assert (out / "base.ckpt").exists()
        assert (out / "train_base.jsonl").exists()

    def test_eval_two_images_two_rows(self, ckpt_path, png_dir, tmp_path):
        out = tmp_path / "eval"
        code = main(
            ["eval", "--checkpoint", str(ckpt_path), "--data", str(png_dir), "--out", str(out)]
        )
        assert code == EXIT_OK
        lines = (out / "eval.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + 2 rows

    def test_bench_writes_table(self, ckpt_path, tmp_path, png_dir):
        out = tmp_path / "bench"
        code = main(
            [
                "bench",
                "--checkpoint",
                str(ckpt_path),
                "--groups",
                "5",
                "--image",
                str(sorted(png_dir.glob("*.png"))[0]),
                "--repetitions",
                "2",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        table = (out / "bench.csv").read_text().splitlines()
        assert table[0].startswith("groups,")
        assert table[1].startswith("5,")


class TestBdrateCommand:
    def test_identical_csvs_print_zero(self, tmp_path, capsys):
        rows = "label,bpp,psnr,ms_ssim,lpips_proxy,enc_ms,dec_ms\n" + "".join(
            f"m{i},{0.1 * (i + 1):.3f},{30 + 4 * i},nan,nan,1,1\n" for i in range(4)
        )
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        a.write_text(rows)
        b.write_text(rows)
        code = main(["bdrate", str(a), str(b)])
        assert code == EXIT_OK
        assert "0.00%" in capsys.readouterr().out
