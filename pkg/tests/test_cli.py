import pandas
import pytest

from physcapture.character import ReferenceMotion
from physcapture.cli import main
from physcapture.cli import parser
from physcapture.cli import read_configuration
from physcapture.physics import SdfGrid
from tests import output_directory


@pytest.fixture(scope="module")
def synthesized():
    output = output_directory("test_cli")
    status = main(
        [
            "synth-motion",
            "--task",
            "stand",
            "--duration",
            "0.1",
            "--noise",
            "1.0",
            "--out",
            str(output / "ground_truth.motion"),
            "--obs",
            str(output / "observations.csv"),
            "--camera-out",
            str(output / "camera.txt"),
            "--scene-out",
            str(output / "scene.toml"),
            "--overwrite",
            "--no-progress",
        ]
    )
    assert status == 0
    return output


def test_synth_motion(synthesized):
    motion = ReferenceMotion.from_file(synthesized / "ground_truth.motion")

    assert len(motion) == 4
    assert (synthesized / "observations.csv").exists()
    assert (synthesized / "camera.txt").exists()
    assert (synthesized / "scene.toml").exists()


def test_eval(synthesized, capsys):
    status = main(
        [
            "eval",
            "--pred",
            str(synthesized / "ground_truth.motion"),
            "--gt",
            str(synthesized / "ground_truth.motion"),
            "--out",
            str(synthesized / "metrics.csv"),
            "--overwrite",
        ]
    )

    assert status == 0
    assert "MPJPE" in capsys.readouterr().out
    assert pandas.read_csv(synthesized / "metrics.csv").iloc[0]["mpjpe"] == 0


def test_capture(synthesized):
    status = main(
        [
            "capture",
            "--ref",
            str(synthesized / "ground_truth.motion"),
            "--obs",
            str(synthesized / "observations.csv"),
            "--camera",
            str(synthesized / "camera.txt"),
            "--scene",
            str(synthesized / "scene.toml"),
            "--prior",
            "gaussian",
            "--samples",
            "8",
            "--keep",
            "2",
            "--out",
            str(synthesized / "capture"),
            "--overwrite",
            "--no-progress",
        ]
    )

    assert status == 0
    assert len(ReferenceMotion.from_file(synthesized / "capture.motion")) == 4
    losses = pandas.read_csv(synthesized / "capture.csv")
    assert list(losses.columns) == ["frame", "time", "tra", "dyn", "ban", "reproj", "total"]


def test_capture_needs_camera(synthesized):
    with pytest.raises(ValueError):
        main(
            [
                "capture",
                "--ref",
                str(synthesized / "ground_truth.motion"),
                "--obs",
                str(synthesized / "observations.csv"),
                "--out",
                str(synthesized / "capture_without_camera"),
            ]
        )


def test_bake_sdf():
    output = output_directory("test_cli_bake_sdf")

    status = main(
        ["bake-sdf", "--resolution", "16", "--out", str(output / "ground.sdf"), "--overwrite"]
    )

    assert status == 0
    assert max(SdfGrid.from_file(output / "ground.sdf").resolution) == 16


def test_optimize_ref(synthesized):
    main(
        [
            "bake-sdf",
            "--scene",
            str(synthesized / "scene.toml"),
            "--resolution",
            "32",
            "--out",
            str(synthesized / "scene.sdf"),
            "--overwrite",
        ]
    )

    status = main(
        [
            "optimize-ref",
            "--obs",
            str(synthesized / "observations.csv"),
            "--camera",
            str(synthesized / "camera.txt"),
            "--sdf",
            str(synthesized / "scene.sdf"),
            "--iterations",
            "3",
            "--out",
            str(synthesized / "reference.motion"),
            "--overwrite",
        ]
    )

    assert status == 0
    assert len(ReferenceMotion.from_file(synthesized / "reference.motion")) == 4


def test_read_configuration():
    output = output_directory("test_read_configuration")
    with open(output / "settings.toml", "w") as settings:
        settings.write("[sampler]\nsamples = 8\nkeep = 2\n\n[cma]\ngenerations = 5\n")
    with open(output / "unknown.toml", "w") as settings:
        settings.write("[network]\nwidth = 3\n")

    configuration = read_configuration(output / "settings.toml")

    assert configuration["sampler"] == {"samples": 8, "keep": 2}
    assert configuration["cma"] == {"generations": 5}
    assert configuration["training"] == {}
    assert read_configuration()["simulation"] == {}

    with pytest.raises(ValueError):
        read_configuration(output / "unknown.toml")

    with pytest.raises(FileNotFoundError):
        read_configuration(output / "nonexistent.toml")


def test_parser():
    args = parser().parse_args(["eval", "--pred", "a.motion", "--gt", "b.motion", "-q"])

    assert args.quiet
    assert args.out is None

    with pytest.raises(SystemExit):
        parser().parse_args([])

    with pytest.raises(SystemExit):
        parser().parse_args(["synth-motion", "--task", "cartwheel", "--out", "a.motion"])
