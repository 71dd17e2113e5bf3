"""Command line: ``sam-bridge serve`` runs the service until interrupted."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import VARIANTS, BridgeConfig
from .errors import BridgeError
from .service import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sam-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--variant", choices=VARIANTS, default="vit-b")
    p.add_argument("--checkpoint", default=None, help="model weights (real mode)")
    p.add_argument("--device", default="cpu")
    p.add_argument("--mock", action=argparse.BooleanOptionalAction, default=True,
                   help="serve deterministic geometry instead of a model")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--timeout-s", type=float, default=30.0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = BridgeConfig(
            variant=args.variant, checkpoint=args.checkpoint, device=args.device,
            mock=args.mock, host=args.host, port=args.port,
            workers=args.workers, timeout_s=args.timeout_s,
        )
        server, service = serve(cfg)
    except BridgeError as exc:
        logging.getLogger(__name__).error("%s", exc)
        return 2
    host, port = server.server_address[:2]
    print(f"serving {service.backend_name} on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
