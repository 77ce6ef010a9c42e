import os
from importlib.metadata import PackageNotFoundError, version
from subprocess import getoutput

DISTRIBUTION = "model-based-fss"


def get_version_tag() -> str:
    """Version from MODEL_BASED_FSS_VERSION, the latest git tag, or the installed
    distribution, in that order.  Falls back to '0.0.0'.
    """
    tag = os.environ.get("MODEL_BASED_FSS_VERSION", "").strip()
    if not tag:
        tag = getoutput("git describe --tags --abbrev=0").strip()
    if not tag or tag.lower().startswith("fatal") or " " in tag:
        try:
            tag = version(DISTRIBUTION)
        except PackageNotFoundError:
            return "0.0.0"
    return tag[1:] if tag.startswith("v") else tag


VERSION = get_version_tag()
