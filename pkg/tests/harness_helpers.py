from attestsim import harness


def private_needles(world, handle, result=None):
    """Every private value that must never cross a protocol boundary."""
    needles = dict(harness.device_secrets(handle, world.fsbl_digest))
    keys = handle.device.boot_state.session_keys
    needles["session_signing_private"] = keys.signing.private_bytes()
    needles["session_dh_private"] = keys.dh.private_bytes()
    if result is not None:
        needles["verifier_dh_private"] = result.dh.private_bytes()
        needles["channel_secret"] = result.channel.secret.value
    return needles
