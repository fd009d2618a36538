import copy
import json
from typing import Any, Dict, List, Tuple

from msd.errors import ConfigError


class OverrideParser:
    """Parses ``key.path=value`` overrides and applies them to a raw config document.

    Values are decoded as JSON when possible (numbers, booleans, lists, objects)
    and kept as bare strings otherwise.
    """

    separator = "="

    def parse(self, text: str) -> Tuple[List[str], Any]:
        if self.separator not in text:
            raise ConfigError(f"override {text!r} is not of the form key=value", key=text)
        key, raw_value = text.split(self.separator, 1)
        key = key.strip()
        path = [part for part in key.split(".") if part]
        if not path:
            raise ConfigError(f"override {text!r} has an empty key", key=text)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        return path, value

    def apply(self, document: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
        result = copy.deepcopy(document)
        for text in overrides:
            path, value = self.parse(text)
            node = result
            for depth, part in enumerate(path[:-1]):
                child = node.setdefault(part, {})
                if not isinstance(child, dict):
                    raise ConfigError(
                        "cannot descend into a non-object value", key=".".join(path[: depth + 1])
                    )
                node = child
            node[path[-1]] = value
        return result
