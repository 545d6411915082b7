from ipaddress import IPv4Address

import dns.message
import dns.rdatatype
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splicemon.diagnostics import (
    DEFAULT_BOGUS,
    MalformedDns,
    build_query,
    build_response,
    classify_failure,
    flag_misconfig,
    inspect_dns,
    parse_dns,
)
from splicemon.packet import FlowKey
from splicemon.records import AppId, FailureClass, Outcome

DOMAIN = "hkminorshort.weixin.qq.com"


def test_bogus_answer_summary():
    s = inspect_dns(build_response(DOMAIN, ["1.1.1.1"]))
    assert s.query_name == DOMAIN
    assert s.answer_addresses == [IPv4Address("1.1.1.1")]
    assert s.response_code == 0 and s.is_response


def test_nxdomain():
    s = inspect_dns(build_response("nope.example", [], rcode=3))
    assert s.answer_addresses == [] and s.response_code == 3


def test_compressed_cname_chain_matches_dnspython():
    wire = build_response("www.example.com", ["93.184.216.34", "93.184.216.35"],
                          cname="edge.cdn.example.com", qid=0x1234)
    assert b"\xc0" in wire  # compression pointers are present
    ref = dns.message.from_wire(wire)
    ours = parse_dns(wire)
    assert ours.query_name == ref.question[0].name.to_text(omit_final_dot=True)
    ref_addrs = [IPv4Address(r.address) for rrset in ref.answer
                 if rrset.rdtype == dns.rdatatype.A for r in rrset]
    assert ours.answer_addresses == ref_addrs
    cname = [rrset for rrset in ref.answer if rrset.rdtype == dns.rdatatype.CNAME][0]
    assert cname[0].target.to_text(omit_final_dot=True) == "edge.cdn.example.com"
    assert ours.transaction_id == ref.id == 0x1234


def test_dnspython_built_response_decodes():
    q = dns.message.make_query(DOMAIN, "A")
    r = dns.message.make_response(q)
    r.answer.append(dns.rrset.from_text(DOMAIN + ".", 60, "IN", "A", "1.1.1.1", "31.13.79.251"))
    s = parse_dns(r.to_wire())
    assert s.query_name == DOMAIN
    assert s.answer_addresses == [IPv4Address("1.1.1.1"), IPv4Address("31.13.79.251")]


def test_query_round_trips_through_dnspython():
    q = dns.message.from_wire(build_query(DOMAIN, qid=7))
    assert q.question[0].name.to_text(omit_final_dot=True) == DOMAIN
    assert q.id == 7


@pytest.mark.parametrize("payload", [b"", b"\x00" * 11, build_response(DOMAIN, ["1.1.1.1"])[:-3]])
def test_malformed_is_tolerated(payload):
    s = inspect_dns(payload)
    assert s.malformed and s.answer_addresses == []


def test_pointer_loop_detected():
    msg = bytearray(b"\x00\x01\x81\x80\x00\x01\x00\x00\x00\x00\x00\x00")
    msg += b"\xc0\x0c" + b"\x00\x01\x00\x01"
    with pytest.raises(MalformedDns):
        parse_dns(bytes(msg))


@given(st.binary(max_size=300))
def test_inspect_never_raises(blob):
    inspect_dns(blob)


def test_flag_misconfig_member():
    key = FlowKey.make(17, "10.0.0.2", 40000, "8.8.8.8", 53)
    rec = flag_misconfig(inspect_dns(build_response(DOMAIN, ["1.1.1.1"])), DEFAULT_BOGUS, key, AppId("wechat"))
    assert rec.cls is FailureClass.DNS_MISCONFIG
    assert DOMAIN in rec.evidence and "1.1.1.1" in rec.evidence
    assert rec.app == AppId("wechat") and rec.key == key


def test_flag_misconfig_non_member_and_empty():
    assert flag_misconfig(inspect_dns(build_response("facebook.com", ["31.13.79.251"]))) is None
    assert flag_misconfig(inspect_dns(build_response("x.com", []))) is None


def test_flag_misconfig_configurable():
    summary = inspect_dns(build_response("a.example", ["10.10.10.10"]))
    assert flag_misconfig(summary) is None
    assert flag_misconfig(summary, {"10.10.10.10"}) is not None


@pytest.mark.parametrize(
    "outcome,elapsed_ms,expected",
    [
        (Outcome.TIMEOUT, 3000, FailureClass.TIMEOUT),
        (Outcome.REFUSED, 2, FailureClass.REFUSED),
        (Outcome.UNREACHABLE, 1, FailureClass.UNREACHABLE),
        (Outcome.CANCELED, 10, FailureClass.CANCELED),
        (Outcome.CANCELED, 3000, FailureClass.TIMEOUT),
    ],
)
def test_classify_failure(outcome, elapsed_ms, expected):
    assert classify_failure(outcome, elapsed_ms * 1_000_000, 3_000_000_000) is expected


def test_classify_success_rejected():
    with pytest.raises(ValueError):
        classify_failure(Outcome.SUCCESS, 1, 10)
