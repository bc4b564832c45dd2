"""Child-process harness: run one CAD script and report through outcome.json.

Invoked as: python3 harness.py <script.py> <stl_out> <workdir>

The harness prefers the real cadquery kernel; when it is not installed, the
bundled fallback kernel (py/shim/cadquery) is placed on sys.path so simple
scripts still execute. After the script runs, the harness makes sure an STL
exists at <stl_out>: it honors a direct export to that path, adopts any STL
the script wrote into the working directory, and as a last resort exports
the last solid-bearing object the script defined.
"""

import json
import os
import shutil
import sys
import traceback
from pathlib import Path

SHIM_DIR = Path(__file__).resolve().parent / "shim"


def write_outcome(workdir, ok, error=None):
    payload = {"ok": ok, "error": error}
    (Path(workdir) / "outcome.json").write_text(json.dumps(payload), encoding="utf-8")


def ensure_kernel():
    try:
        import cadquery  # noqa: F401
    except ModuleNotFoundError:
        sys.path.insert(0, str(SHIM_DIR))


def find_exportable(namespace):
    try:
        import cadquery
    except ModuleNotFoundError:
        return None
    exportable = None
    for value in namespace.values():
        if isinstance(value, cadquery.Workplane) or hasattr(value, "exportStl"):
            exportable = value
    return exportable


def export_object(obj, path):
    import cadquery

    try:
        cadquery.exporters.export(obj, path)
        return
    except Exception:
        pass
    obj.exportStl(path)


def collect_stl(stl_out, workdir, namespace):
    """Return None when an STL is in place at stl_out, else an error text."""
    out = Path(stl_out)
    if out.exists() and out.stat().st_size > 0:
        return None
    produced = [p for p in Path(workdir).rglob("*.stl")
                if p.is_file() and p.stat().st_size > 0]
    if produced:
        produced.sort(key=lambda p: p.stat().st_mtime)
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(produced[-1], out)
        return None
    exportable = find_exportable(namespace)
    if exportable is None:
        return ("script completed but produced no STL file and defined no "
                "exportable solid")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        export_object(exportable, str(out))
    except Exception:
        return "automatic STL export failed:\n" + traceback.format_exc()
    if out.exists() and out.stat().st_size > 0:
        return None
    return "automatic STL export produced no file"


def main():
    script_path, stl_out, workdir = sys.argv[1], sys.argv[2], sys.argv[3]
    os.chdir(workdir)
    ensure_kernel()
    source = Path(script_path).read_text(encoding="utf-8")
    namespace = {"__name__": "__main__", "__file__": script_path}
    try:
        code = compile(source, "script.py", "exec")
        exec(code, namespace)
    except SystemExit as exit_call:
        if exit_call.code not in (0, None):
            write_outcome(workdir, False, f"script exited with code {exit_call.code}")
            return
    except BaseException:
        write_outcome(workdir, False, traceback.format_exc())
        return
    error = collect_stl(stl_out, workdir, namespace)
    write_outcome(workdir, error is None, error)


if __name__ == "__main__":
    main()
