import csv
import json
import logging
import os
from encodings import utf_8
from typing import Any, Dict, Iterable, Sequence

from flatten_json import flatten


def read_json_file(file_path):
    with open(file_path, "r", encoding=utf_8.getregentry().name) as f:
        json_data = json.load(f)
    return json_data


def write_json_file(file_path, json_data):
    with open(file_path, "w", encoding=utf_8.getregentry().name) as f:
        json.dump(json_data, f, sort_keys=True, indent=2)


def flatten_json_data(json_data):
    return flatten(json_data, ".")


def get_absolute_path(path: str) -> str:
    if path.startswith("~"):
        return os.path.expanduser(path)
    return os.path.abspath(path)


def write_csv_file(file_path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    """Rows are written with repr() for floats so values survive a round trip."""
    with open(file_path, "w", newline="", encoding=utf_8.getregentry().name) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv_file(file_path: str):
    with open(file_path, "r", newline="", encoding=utf_8.getregentry().name) as f:
        return [row for row in csv.reader(f) if row and not row[0].startswith("#")]


def parse_coefficients(text: str, names: Sequence[str]) -> Dict[str, float]:
    """Parse ``beta=15,nu=0`` or a bare positional ``15,0,0`` into a name -> value map."""
    values: Dict[str, float] = {}
    parts = [p.strip() for p in text.split(",") if p.strip()]
    for position, part in enumerate(parts):
        if "=" in part:
            key, value = (s.strip() for s in part.split("=", 1))
        elif position < len(names):
            key, value = names[position], part
        else:
            raise ValueError("too many coefficients in {!r}".format(text))
        if key not in names:
            raise ValueError("unknown coefficient {!r}, expected one of {}".format(key, list(names)))
        values[key] = float(value)
    return values


def update_verification_status(failed, message):
    if failed:
        logging.info("\033[31m❌ {} Not Successful\033[0m".format(message))
    else:
        logging.info("\033[32m✔ {} Successful \033[0m".format(message))
