"""Runs each CLI command and validates its JSON against the shipped schema."""
import json
import pathlib
import subprocess
import sys
import tempfile

import jsonschema

rose, schemas = sys.argv[1], pathlib.Path(sys.argv[2])


def run(args):
    res = subprocess.run([rose, *args], capture_output=True, text=True, check=False)
    if res.returncode != 0:
        sys.exit(f"rose {' '.join(args)} failed ({res.returncode}): {res.stderr}")
    return json.loads(res.stdout)


def check(doc, name):
    schema = json.loads((schemas / name).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    jsonschema.validate(doc, schema, cls=jsonschema.Draft202012Validator)
    print(f"ok {name}")


with tempfile.TemporaryDirectory() as tmp:
    csv = pathlib.Path(tmp) / "d.csv"
    lines = ["y,x,z1,z2"]
    for i in range(120):
        z1, z2 = (i % 7) / 3.0, (i % 5) / 2.0
        x = z1 + ((i * 37) % 11) / 5.0 - 1.0
        y = x + z1 * z2 + ((i * 53) % 13) / 6.0 - 1.0
        lines.append(f"{y},{x},{z1},{z2}")
    csv.write_text("\n".join(lines) + "\n")

    check(run(["fit", str(csv), "--seed", "1", "--k-folds", "2", "--trees", "20",
               "--forest-trees", "20", "--depth", "2"]), "theta_report.schema.json")
    check(run(["fit", str(csv), "--seed", "1", "--scheme", "efficient", "--k-folds", "3",
               "--forest-trees", "20"]), "theta_report.schema.json")
    check(run(["simulate", "--dgp", "sim2", "--n", "200", "--reps", "3", "--seed", "2",
               "--schemes", "unweighted,rose,oracle", "--trees", "20", "--replications"]),
          "sim_report.schema.json")
    check(run(["simulate", "--dgp", "sim3", "--n", "1000", "--reps", "2", "--seed", "2",
               "--schemes", "unweighted,rose_j2", "--trees", "10", "--forest-trees", "10"]),
          "sim_report.schema.json")
    check(run(["tune", str(csv), "--grid", "1,2,3", "--seed", "3", "--trees", "20",
               "--forest-trees", "20"]), "tune_report.schema.json")
