import json
import os
from typing import Any, Dict, List, Union

import pandas as pd
from pydantic import BaseModel

Payload = Union[BaseModel, Dict[str, Any], List[Any]]


class ReportWriter:
    """
    Writes run artifacts under one output directory: CSV for data, JSON (sorted keys) for metadata.

    Nothing time- or host-dependent is written, so identical runs produce identical files.
    """

    def __init__(self, output_dir: str):
        self.output_dir = output_dir

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _prepare(self, name: str) -> str:
        target = self.path(name)
        os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
        return target

    def write_json(self, name: str, payload: Payload) -> str:
        data = _plain(payload)
        target = self._prepare(name)
        with open(target, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
            f.write("\n")
        return target

    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        target = self._prepare(name)
        frame.to_csv(target, index=False, encoding="utf-8", lineterminator="\n")
        return target

    def read_json(self, name: str) -> Dict[str, Any]:
        with open(self.path(name), "r", encoding="utf-8") as f:
            return json.load(f)

    def summarize_reports(self, names: List[str]) -> Dict[str, Any]:
        """
        Merges previously written verification reports into one bundle keyed by report file,
        with an overall flag.
        """
        by_name = {}
        for name in names:
            data = self.read_json(name)
            by_name[name] = {"name": data.get("name"), "scenario": data.get("scenario"), "passed": data.get("passed")}

        ordered = dict(sorted(by_name.items()))
        return {
            "reports": ordered,
            "passed": all(entry["passed"] for entry in ordered.values()),
            "count": len(ordered),
        }


def _plain(payload: Payload) -> Any:
    if isinstance(payload, BaseModel):
        return payload.model_dump(mode="json")
    if isinstance(payload, dict):
        return {k: _plain(v) for k, v in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [_plain(v) for v in payload]
    return payload
