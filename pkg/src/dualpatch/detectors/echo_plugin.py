"""Loopback plugin: answers every request with one fixed detection.

    python -m dualpatch.detectors.echo_plugin --box 10 10 40 30 --score 0.9
"""
import argparse
import sys

from .external import PROTOCOL_VERSION, _HEADER, serve


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--box", type=float, nargs=4, default=[1.0, 2.0, 3.0, 4.0])
    ap.add_argument("--score", type=float, default=0.9)
    ap.add_argument("--class-id", type=int, default=0)
    ap.add_argument("--bad-version", action="store_true", help="reply with a wrong protocol version")
    args = ap.parse_args(argv)
    det = (*args.box, args.score, args.class_id)
    stdin, stdout = sys.stdin.buffer, sys.stdout.buffer
    if args.bad_version:
        from .external import read_frame
        read_frame(stdin)
        stdout.write(_HEADER.pack(PROTOCOL_VERSION + 1, 0))
        stdout.flush()
        return
    serve(lambda image, modality: [det], stdin, stdout)


if __name__ == "__main__":
    main()
