"""
The command line
================

Everything above is also reachable from the ``fedrand`` command.  This script
drives it in-process against a temporary directory.
"""

# %%
import json
import tempfile
from pathlib import Path

from fedrand.cli import main

out = Path(tempfile.mkdtemp()) / "run"
code = main(["run", "--rounds", "5", "--seed", "2", "--out", str(out)])
print("exit code", code)
print(sorted(p.name for p in out.iterdir()))

# %%
main(["report", str(out)])
main(["attack", str(out)])
print(json.loads((out / "attack_report.json").read_text())["clients"][:2])

# %%
# Bad configuration is rejected before any compute (exit code 2).
print("exit code", main(["run", "--clients", "3", "--participants", "4"]))
