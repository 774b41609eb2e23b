"""replay: rerun a recorded manifest and compare output hashes."""
from utils.errors import FingerprintMismatchError
from utils.manifest import ManifestManager, file_sha256


def replay(args):
    manager = ManifestManager(args.settings.run_dir)
    path = args.manifest or manager.latest()
    manifest = manager.load(path)
    if manifest.subcommand == "replay":
        print(f"{path} records a replay; nothing to rerun")
        return 0
    print(f"Replaying {manifest.subcommand} from {path}")
    print(f"  argv: {' '.join(manifest.argv)}")

    code = args.runner(manifest.argv)
    if code != 0:
        return code

    differing = []
    for role, entry in manifest.outputs.items():
        expected = entry.get("sha256")
        if expected is None:
            print(f"  {role}: {entry['path']} (not compared)")
            continue
        actual = file_sha256(entry["path"])
        same = actual == expected
        print(f"  {role}: {entry['path']} {'identical' if same else 'DIFFERS'}")
        if not same:
            differing.append(role)
    if differing:
        raise FingerprintMismatchError(f"replay produced different outputs: {', '.join(differing)}")
    print("Replay reproduced every recorded output.")
    return 0


def setup(subparsers, settings):
    parser = subparsers.add_parser("replay", help="rerun a run manifest and verify its outputs")
    parser.add_argument("manifest", nargs="?", help="manifest JSON (default: latest in the run directory)")
    parser.set_defaults(func=replay)
