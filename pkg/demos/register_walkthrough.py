"""Replay one four-packet flow through the simulator and print its window register."""
from segmatch.backup import BackupTree, Leaf
from segmatch.dataplane import SimConfig, Simulator
from segmatch.flows import FiveTuple, PacketRecord, canonical_key
from segmatch.keyseg import KeySegment
from segmatch.tables import compile_tables, dump_text

client = FiveTuple(0x0A000001, 0x0A000002, 40000, 443, 6)
rules = [
    KeySegment(6, ((500, 520), (-260, -250), (440, 450), (-900, -880)), 12.0,
               ((512,), (-253,), (443,), (-890,))),
    KeySegment(1, ((100, 120), (-300, -280), None, None), 4.0, ((100, 120), (-300, -280), (), ())),
]
tables = compile_tables(rules)
print(dump_text(tables))

sim = Simulator(tables, BackupTree(Leaf(0), 4, 0), SimConfig())
key = canonical_key(client)
print("packet  feature  window                    event")
for i, v in enumerate([512, -253, 443, -890, 1200]):
    pkt = PacketRecord(10 * i, client if v > 0 else client.reverse(), abs(v))
    ev = sim.process_packet(pkt)
    window = sim.states[key].window
    note = "" if ev is None else f"class {ev.verdict} ({ev.cause.value}, packet {ev.index})"
    if ev is None and key in sim.classified:
        note = "bypassed"
    print(f"{i + 1:>6}  {v:>7}  {str(window):<24}  {note}")
