# test_persistence_and_cli.py
"""
Persistence and command-line tests.

Covers:
- Run config parsing and schema errors
- Checkpoint container: byte-stable round trip, corrupt files, PCA storage
- Image and mask I/O: pixel mapping, thresholds, center crop
- Directory and procedural datasets
- cli_app.main: maskgen, train, pca, inpaint, eval and the error line for usage and unexpected failures
"""

import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import torch
from PIL import Image

from checkpoint import load_checkpoint, save_checkpoint, store_pca
from cli_app import main
from config import RunConfig, load_run_config
from dataset import OBJECT, PAINTING, load_dir, procedural_corpus
from denoiser import init_params
from embedder import fit_pca
from errors import CheckpointError, ConfigurationError, DegenerateInputError
from image_io import (center_crop_resize, list_images, load_image_tensor, load_mask, pil_to_tensor,
                      read_image, save_image, save_mask, to_uint8)
from test_training import tiny_run_config


def run_cli(*argv):
    """Run the CLI quietly; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(["--log-level", "CRITICAL", *argv])
    return code, out.getvalue(), err.getvalue()


class TestRunConfig(unittest.TestCase):
    """RunConfig and load_run_config."""

    def test_defaults_round_trip(self):
        config = RunConfig()
        self.assertEqual(RunConfig.from_dict(config.to_dict()), config)

    def test_unknown_section_key(self):
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig.from_dict({"train": {"stepz": 10}})
        self.assertIn("stepz", str(ctx.exception))

    def test_unknown_top_level_key(self):
        with self.assertRaises(ConfigurationError):
            RunConfig.from_dict({"trian": {}})

    def test_out_of_range_value(self):
        with self.assertRaises(ConfigurationError):
            RunConfig.from_dict({"train": {"p_drop": 1.5}})
        with self.assertRaises(ConfigurationError):
            RunConfig.from_dict({"data": {"source": "dir"}})

    def test_lists_become_tuples(self):
        config = RunConfig.from_dict({"model": {"attn_levels": [1]}})
        self.assertEqual(config.model.attn_levels, (1,))

    def test_load_errors(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(FileNotFoundError):
                load_run_config(Path(tmpdir) / "missing.json")
            bad = Path(tmpdir) / "bad.json"
            bad.write_text("{not json", encoding="utf-8")
            with self.assertRaises(ConfigurationError):
                load_run_config(bad)

    def test_load_from_file(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "run.json"
            path.write_text(json.dumps({"schedule": {"steps": 50}, "output_dir": "x"}), encoding="utf-8")
            config = load_run_config(path)
            self.assertEqual(config.schedule.steps, 50)
            self.assertEqual(config.output_dir, "x")


class TestCheckpoint(unittest.TestCase):
    """Checkpoint container."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.config = tiny_run_config(self.dir)
        self.model = init_params(self.config.model, seed=4)
        self.path = save_checkpoint(self.dir / "model.rfpt", self.config, self.model, step=7)

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_load_save_is_byte_identical(self):
        ckpt = load_checkpoint(self.path)
        again = save_checkpoint(self.dir / "again.rfpt", ckpt.run_config, ckpt.build_model(), step=ckpt.step)
        self.assertEqual(self.path.read_bytes(), again.read_bytes())

    def test_header_fields(self):
        ckpt = load_checkpoint(self.path)
        self.assertEqual(ckpt.step, 7)
        self.assertEqual(ckpt.run_config, self.config)
        self.assertIsNone(ckpt.pca)

    def test_build_model_restores_weights(self):
        restored = load_checkpoint(self.path).build_model()
        original = self.model.state_dict()
        for name, tensor in restored.state_dict().items():
            self.assertTrue(torch.equal(tensor, original[name]), name)

    def test_bad_magic(self):
        data = bytearray(self.path.read_bytes())
        data[:4] = b"NOPE"
        self.path.write_bytes(bytes(data))
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_truncated_file(self):
        data = self.path.read_bytes()
        self.path.write_bytes(data[:-3])
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_trailing_bytes(self):
        self.path.write_bytes(self.path.read_bytes() + b"\x00")
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_checkpoint(self.dir / "nope.rfpt")

    def test_pca_storage(self):
        ckpt = load_checkpoint(self.path)
        with self.assertRaises(ConfigurationError):
            ckpt.require_pca()

        rng = np.random.default_rng(0)
        basis = fit_pca(list(rng.normal(size=(12, 8))), k=3)
        target = store_pca(self.path, basis, target=self.dir / "with_pca.rfpt")
        stored = load_checkpoint(target).require_pca()
        self.assertEqual(stored.k, 3)
        np.testing.assert_allclose(stored.components, basis.components, atol=1e-6)
        np.testing.assert_allclose(stored.mean, basis.mean, atol=1e-6)
        self.assertEqual(load_checkpoint(target).step, 7)


class TestImageIO(unittest.TestCase):
    """Pixel mapping, masks and crops."""

    def test_uint8_mapping_round_trip(self):
        arr = np.random.default_rng(0).integers(0, 256, size=(5, 6, 3), dtype=np.uint8)
        x = pil_to_tensor(Image.fromarray(arr))
        self.assertEqual(tuple(x.shape), (3, 5, 6))
        self.assertTrue(bool((x >= -1).all() and (x <= 1).all()))
        np.testing.assert_array_equal(to_uint8(x), arr)

    def test_extremes(self):
        x = torch.tensor([-1.0, 0.0, 1.0, 3.0]).view(1, 1, 4)
        self.assertEqual(to_uint8(x).reshape(-1).tolist(), [0, 128, 255, 255])

    def test_save_and_reload_image(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            x = torch.rand(3, 8, 8) * 2 - 1
            path = save_image(x, Path(tmpdir) / "out.png")
            back = np.asarray(read_image(path))
            np.testing.assert_array_equal(back, to_uint8(x))

    def test_mask_threshold(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "m.png"
            Image.fromarray(np.array([[0, 127], [128, 255]], dtype=np.uint8)).save(path)
            self.assertEqual(load_mask(path).tolist(), [[0.0, 0.0], [1.0, 1.0]])

    def test_mask_pgm_round_trip(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            m = torch.ones(8, 8)
            m[2:5, 3:7] = 0
            path = save_mask(m, Path(tmpdir) / "m.pgm")
            self.assertTrue(path.read_bytes().startswith(b"P5"))
            self.assertTrue(torch.equal(load_mask(path), m))

    def test_center_crop_takes_middle(self):
        arr = np.zeros((32, 64, 3), dtype=np.uint8)
        arr[:, :16] = (255, 0, 0)
        arr[:, 16:48] = (0, 255, 0)
        arr[:, 48:] = (0, 0, 255)
        img = center_crop_resize(Image.fromarray(arr), 32)
        self.assertEqual(img.size, (32, 32))
        x = pil_to_tensor(img)
        self.assertTrue(torch.equal(x[1], torch.ones(32, 32)))
        self.assertTrue(torch.equal(x[0], -torch.ones(32, 32)))

    def test_load_image_tensor_resizes(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "big.png"
            Image.new("RGB", (40, 20), (200, 100, 50)).save(path)
            x = load_image_tensor(path, 8)
            self.assertEqual(tuple(x.shape), (3, 8, 8))

    def test_list_images_sorted(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            for name in ("b.png", "a.png", "c.txt", "A.ppm"):
                (Path(tmpdir) / name).write_bytes(b"")
            names = [p.name for p in list_images(tmpdir)]
            self.assertEqual(names, ["A.ppm", "a.png", "b.png"])


class TestDatasets(unittest.TestCase):
    """load_dir and the procedural corpus."""

    def test_load_dir_skips_unreadable(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            Image.new("RGB", (12, 12), (10, 20, 30)).save(Path(tmpdir) / "one.png")
            Image.new("RGB", (16, 10), (90, 80, 70)).save(Path(tmpdir) / "two.png")
            (Path(tmpdir) / "broken.png").write_bytes(b"not an image")
            with self.assertLogs("dataset", level="WARNING") as logs:
                ds = load_dir(tmpdir, 8)
            self.assertEqual(len(ds), 2)
            self.assertEqual(ds.labels, ["one.png", "two.png"])
            self.assertEqual(tuple(ds.images.shape), (2, 3, 8, 8))
            self.assertTrue(any("broken.png" in line for line in logs.output))

    def test_load_dir_empty(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(DegenerateInputError):
                load_dir(tmpdir, 8)

    def test_procedural_is_deterministic(self):
        a = procedural_corpus(3, 6, 16)
        b = procedural_corpus(3, 6, 16)
        self.assertTrue(torch.equal(a.images, b.images))
        self.assertFalse(torch.equal(a.images, procedural_corpus(4, 6, 16).images))
        self.assertEqual(a.labels, [PAINTING, OBJECT] * 3)

    def test_single_image_corpus(self):
        ds = procedural_corpus(0, 1, 16)
        self.assertEqual(len(ds), 1)
        self.assertEqual(ds.labels, [PAINTING])

    def test_families_are_separated_in_color(self):
        ds = procedural_corpus(0, 40, 16)
        warmth = ds.images[:, 0] - ds.images[:, 2]
        paintings = warmth[ds.indices_with_label(PAINTING)].mean()
        objects = warmth[ds.indices_with_label(OBJECT)].mean()
        self.assertGreater(float(paintings - objects), 0.3)

    def test_split(self):
        ds = procedural_corpus(0, 10, 8)
        train, held = ds.split(4)
        self.assertEqual((len(train), len(held)), (6, 4))
        self.assertTrue(torch.equal(held.images, ds.images[6:]))


class TestCommandLine(unittest.TestCase):
    """cli_app.main end to end on an 8x8 model."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write_config(self, **train):
        path = self.dir / "run.json"
        path.write_text(json.dumps(tiny_run_config(self.dir / "run", **train).to_dict()), encoding="utf-8")
        return path

    def test_maskgen_is_reproducible(self):
        for name in ("first", "second"):
            code, out, _ = run_cli("--seed", "3", "maskgen", "--n", "3", "--out-dir", str(self.dir / name))
            self.assertEqual(code, 0)
            self.assertIn("masks=3", out)
        for i in range(3):
            file = f"mask_{i:04d}.pgm"
            self.assertEqual((self.dir / "first" / file).read_bytes(), (self.dir / "second" / file).read_bytes())
            m = load_mask(self.dir / "first" / file)
            hole = 1.0 - float(m.mean())
            self.assertTrue(0.1 <= hole <= 0.5, hole)

    def test_maskgen_rejects_extension(self):
        code, _, err = run_cli("maskgen", "--ext", ".jpg", "--out-dir", str(self.dir))
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error kind=ParameterError message="))

    def test_missing_config_prints_one_error_line(self):
        code, out, err = run_cli("train", str(self.dir / "missing.json"))
        self.assertEqual(code, 1)
        self.assertEqual(out, "")
        lines = err.splitlines()
        self.assertEqual(len(lines), 1)
        self.assertTrue(lines[0].startswith("error kind=FileNotFoundError message=\""))

    def test_unparsable_arguments_print_one_error_line(self):
        code, out, err = run_cli("inpaint", "--bg", "x")
        self.assertEqual(code, 2)
        self.assertEqual(out, "")
        lines = err.splitlines()
        self.assertEqual(len(lines), 1)
        self.assertTrue(lines[0].startswith("error kind=UsageError message=\"refpaint inpaint: "))

    def test_unexpected_exception_prints_one_error_line(self):
        with mock.patch("cli_app.cmd_maskgen", side_effect=KeyError("lost")):
            code, out, err = run_cli("maskgen", "--out-dir", str(self.dir))
        self.assertEqual(code, 1)
        self.assertEqual(out, "")
        self.assertEqual(err.splitlines(), ["error kind=KeyError message=\"'lost'\""])

    def test_zero_step_training_writes_initial_weights(self):
        config = self._write_config(steps=0, fit_pca=False)
        code, out, _ = run_cli("--seed", "11", "train", str(config))
        self.assertEqual(code, 0)
        self.assertIn("step=0", out)
        ckpt = load_checkpoint(self.dir / "run" / "model.rfpt")
        expected = init_params(ckpt.run_config.model, seed=11).state_dict()
        tensors = ckpt.model_tensors()
        self.assertEqual(list(tensors), list(expected))
        for name, tensor in tensors.items():
            self.assertTrue(torch.equal(tensor, expected[name]), name)

    def test_pca_command(self):
        config = self._write_config(steps=1, fit_pca=False)
        self.assertEqual(run_cli("train", str(config))[0], 0)
        ckpt_path = self.dir / "run" / "model.rfpt"
        target = self.dir / "pca.rfpt"
        code, out, _ = run_cli("pca", "--checkpoint", str(ckpt_path), "--k", "2", "--out", str(target))
        self.assertEqual(code, 0)
        self.assertIn("k=2", out)
        self.assertEqual(load_checkpoint(target).require_pca().k, 2)
        self.assertIsNone(load_checkpoint(ckpt_path).pca)

    def test_inpaint_without_guidance_ignores_reference(self):
        config = self._write_config(steps=1)
        self.assertEqual(run_cli("train", str(config))[0], 0)
        ckpt_path = self.dir / "run" / "model.rfpt"

        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(self.dir / "bg.png")
        Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(self.dir / "ref_a.png")
        Image.new("RGB", (8, 8), (0, 0, 255)).save(self.dir / "ref_b.png")
        mask = torch.ones(8, 8)
        mask[2:6, 2:6] = 0
        save_mask(mask, self.dir / "mask.pgm")

        outputs = []
        for ref in ("ref_a.png", "ref_b.png"):
            out_path = self.dir / f"out_{ref}"
            code, out, err = run_cli("--seed", "5", "inpaint", "--checkpoint", str(ckpt_path),
                                     "--bg", str(self.dir / "bg.png"), "--mask", str(self.dir / "mask.pgm"),
                                     "--ref", str(self.dir / ref), "--omega", "0", "--steps", "4",
                                     "--out", str(out_path))
            self.assertEqual(code, 0, err)
            self.assertIn("output=", out)
            outputs.append(np.asarray(read_image(out_path)))
        np.testing.assert_array_equal(outputs[0], outputs[1])

        bg = np.asarray(read_image(self.dir / "bg.png"))
        keep = mask.numpy().astype(bool)
        np.testing.assert_array_equal(outputs[0][keep], bg[keep])


    def test_eval_command_writes_report(self):
        config = self._write_config(steps=1, fit_pca=False)
        self.assertEqual(run_cli("train", str(config))[0], 0)
        rng = np.random.default_rng(2)
        for name in ("output.png", "original.png", "cp.png"):
            Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(self.dir / name)
        mask = torch.ones(8, 8)
        mask[:4, :4] = 0
        save_mask(mask, self.dir / "mask.pgm")
        (self.dir / "manifest.csv").write_text(
            "output,original,cp,mask\noutput.png,original.png,cp.png,mask.pgm\n", encoding="utf-8")

        report = self.dir / "report.csv"
        code, out, err = run_cli("eval", "--checkpoint", str(self.dir / "run" / "model.rfpt"),
                                 "--manifest", str(self.dir / "manifest.csv"), "--out", str(report))
        self.assertEqual(code, 0, err)
        self.assertRegex(out, r"^rows=1 dist_original=[0-9.]+ dist_cp_object=[0-9.]+")
        self.assertTrue(report.exists())
        self.assertIn("output.png", report.read_text(encoding="utf-8"))

if __name__ == '__main__':
    unittest.main()
