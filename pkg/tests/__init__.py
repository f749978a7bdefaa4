import os
import re
from os import PathLike
from pathlib import Path
from typing import Dict
from typing import List

import xarray

DATA_DIRECTORY = Path(__file__).parent.absolute().resolve() / "data"
INPUT_DIRECTORY = DATA_DIRECTORY / "input"
OUTPUT_DIRECTORY = DATA_DIRECTORY / "output"
REFERENCE_DIRECTORY = DATA_DIRECTORY / "reference"


def output_directory(name: str) -> Path:
    directory = OUTPUT_DIRECTORY / name
    if not directory.exists():
        directory.mkdir(parents=True, exist_ok=True)
    return directory


def check_reference_directory(
    test_directory: PathLike,
    reference_directory: PathLike,
    skip_lines: Dict[str, List[int]] = None,
):
    """
    assert that every file of the reference directory has an identical counterpart in the test directory; netCDF
    files compare by dataset, binary files by bytes and text files line by line (minus the skipped lines)
    """

    if not isinstance(test_directory, Path):
        test_directory = Path(test_directory)
    if not isinstance(reference_directory, Path):
        reference_directory = Path(reference_directory)
    if skip_lines is None:
        skip_lines = {}

    for reference_filename in sorted(reference_directory.iterdir()):
        if reference_filename.is_dir():
            check_reference_directory(
                test_directory / reference_filename.name, reference_filename, skip_lines
            )
            continue

        test_filename = test_directory / reference_filename.name
        cwd = Path.cwd()
        message = f'"{os.path.relpath(test_filename, cwd)}" != "{os.path.relpath(reference_filename, cwd)}"'

        if reference_filename.suffix == ".nc":
            with xarray.open_dataset(test_filename) as test_dataset, xarray.open_dataset(
                reference_filename
            ) as reference_dataset:
                assert test_dataset.identical(reference_dataset), message
        elif reference_filename.suffix in (".sdf", ".ckpt", ".dataset"):
            assert test_filename.read_bytes() == reference_filename.read_bytes(), message
        else:
            with open(test_filename) as test_file, open(reference_filename) as reference_file:
                test_lines = list(test_file.readlines())
                reference_lines = list(reference_file.readlines())

            lines_to_skip = set()
            for file_mask, line_indices in skip_lines.items():
                if (
                    file_mask in str(test_filename)
                    or re.match(file_mask, str(test_filename))
                ) and len(test_lines) > 0:
                    lines_to_skip.update(
                        line_index % len(test_lines) for line_index in line_indices
                    )

            for line_index in sorted(lines_to_skip, reverse=True):
                del test_lines[line_index], reference_lines[line_index]

            assert "\n".join(test_lines) == "\n".join(reference_lines), message
