"""Scheme registry: uniform key generation, embedding and extraction.

Each scheme module exposes generate_keys / embed / extract; this module
dispatches on the scheme name and converts between typed keys and the
serializable KeyBundle.
"""

from __future__ import annotations

from wbmark.core import BitString
from wbmark.errors import InputError
from wbmark.keybundle import KeyBundle


def _modules():
    from wbmark.schemes import deepsigns, diction, riga, uchida
    return {"uchida": uchida, "riga": riga, "deepsigns": deepsigns, "diction": diction}


_KEY_TYPES = None


def _key_types():
    global _KEY_TYPES
    if _KEY_TYPES is None:
        from wbmark.schemes.deepsigns import DeepSignsKeys
        from wbmark.schemes.diction import DictionKeys
        from wbmark.schemes.riga import RigaKeys
        from wbmark.schemes.uchida import UchidaKeys
        _KEY_TYPES = {"uchida": UchidaKeys, "riga": RigaKeys,
                      "deepsigns": DeepSignsKeys, "diction": DictionKeys}
    return _KEY_TYPES


def scheme_names() -> tuple[str, ...]:
    return ("uchida", "riga", "deepsigns", "diction")


def get_module(scheme: str):
    mods = _modules()
    if scheme not in mods:
        raise InputError(f"unknown scheme {scheme!r} (expected one of {sorted(mods)})")
    return mods[scheme]


def keys_to_bundle(keys) -> KeyBundle:
    return keys.to_bundle()


def bundle_to_keys(bundle: KeyBundle):
    return _key_types()[bundle.scheme].from_bundle(bundle)


def save_keys(keys, path) -> None:
    keys.to_bundle().save(path)


def load_keys(path):
    return bundle_to_keys(KeyBundle.load(path))


def generate_keys(scheme: str, model, payload_bits: int, seed: int,
                  layer_index: int | None = None, *, train=None, **params):
    """Scheme-dispatched key generation.

    deepsigns needs the training split (GMM + trigger selection) and
    returns keys only; the fitted mixture is cached on the keys object
    for the immediately following embed call.
    """
    mod = get_module(scheme)
    if scheme == "deepsigns":
        keys, gmm = mod.generate_keys(model, payload_bits, seed, layer_index,
                                      train=train, **params)
        keys._gmm_cache = gmm
        return keys
    return mod.generate_keys(model, payload_bits, seed, layer_index, **params)


def embed(scheme: str, base, payload: BitString, keys, train, test, *,
          seed: int = 0, **params):
    mod = get_module(scheme)
    if scheme == "deepsigns":
        params.setdefault("gmm", getattr(keys, "_gmm_cache", None))
    if isinstance(params.get("hyper"), dict):
        from wbmark.schemes.diction import DictionHyper
        params["hyper"] = DictionHyper(**params["hyper"])
    if isinstance(params.get("cfg"), dict):
        from wbmark.models import TrainConfig
        params["cfg"] = TrainConfig(**params["cfg"])
    return mod.embed(base, payload, keys, train, test, seed=seed, **params)


def scheme_of(keys) -> str:
    for name, t in _key_types().items():
        if isinstance(keys, t):
            return name
    raise InputError(f"unrecognized key object {type(keys).__name__}")


def extract(keys, target, *, train=None, **params) -> BitString:
    """Extraction dispatched on the keys' scheme.

    deepsigns reads its trigger samples out of the training split; the
    other schemes need no data.
    """
    scheme = scheme_of(keys)
    mod = get_module(scheme)
    if scheme == "deepsigns":
        if train is None:
            raise InputError("deepsigns extraction needs the training split")
        return mod.extract(target, keys, train)
    return mod.extract(target, keys, **params)
