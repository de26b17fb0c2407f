import json

from trustarb.core import AgentPrediction, FinalDecision, Policy, Stage, default_label_set
from trustarb.orchestrator import AgentRound, ReEvalTrace
from trustarb.trust import TrustProfile
from trustarb.vectorstore import ClassVote


def make_profile(agent_id, ece_v, ocr_v, ccc_v, cwa_v, n=512, accuracy=0.5):
    """Profile with pinned aggregate components for arbitration tests."""
    return TrustProfile(
        agent_id=agent_id,
        n=n,
        accuracy=accuracy,
        avg_conf=0.9,
        conf_correct=0.95,
        conf_incorrect=0.94,
        confidence_gap=0.01,
        consistency_gap=None,
        ocr=ocr_v,
        hcw=int(round((ocr_v or 0) * n)),
        thc=n,
        ccc=ccc_v,
        ccc_p_value=0.001 if ccc_v is not None else None,
        ece=ece_v,
        cwa=cwa_v,
    )


def reply_json(category, confidence, text_key="justification", text="synthetic"):
    return json.dumps({"category": category, text_key: text, "confidence": confidence})


def write_fixture_file(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def build_audit_fixture(
    agent_id,
    n=160,
    reaffirm=20,
    reaffirm_correct=3,
    overcorrect=3,
    disagree=36,
    disagree_correct=16,
):
    """Construct a run with exact reaffirmation/overcorrection/disagreement
    counts for the audit analyses. Returns (truth, predictions, traces,
    decisions)."""
    labels = default_label_set()

    def wrong(truth_label, offset):
        return labels.labels[(labels.rank(truth_label) + offset) % len(labels)]

    reaffirm_wrong = reaffirm - reaffirm_correct
    oc_dc = min(overcorrect, disagree_correct)
    dc_left = disagree_correct - oc_dc
    rw_dc = min(reaffirm_wrong, dc_left)
    rest_dc = dc_left - rw_dc
    dw = disagree - disagree_correct
    rw_dw = min(reaffirm_wrong - rw_dc, dw)
    rest_dw = dw - rw_dw
    rest = n - reaffirm - overcorrect
    assert rest_dc + rest_dw <= rest, "infeasible audit counts"

    # (initial, revised, decision) selectors per slot group, in order
    plan = (
        [("truth", "truth", "truth")] * reaffirm_correct
        + [("w1", "w1", "truth")] * rw_dc
        + [("w1", "w1", "w2")] * rw_dw
        + [("w1", "w1", "w1")] * (reaffirm_wrong - rw_dc - rw_dw)
        + [("truth", "w1", "truth")] * oc_dc
        + [("truth", "w1", "w1")] * (overcorrect - oc_dc)
        + [("w1", "w2", "truth")] * rest_dc
        + [("w1", "truth", "w2")] * rest_dw
        + [("w1", "truth", "truth")] * (rest - rest_dc - rest_dw)
    )
    assert len(plan) == n

    truth = {}
    predictions = []
    traces = []
    decisions = []
    for i, (init_sel, rev_sel, dec_sel) in enumerate(plan):
        image_id = f"img{i:04d}"
        t = labels.labels[i % len(labels)]
        truth[image_id] = t
        pick = {"truth": t, "w1": wrong(t, 1), "w2": wrong(t, 2)}
        initial = AgentPrediction(agent_id, image_id, Stage.INITIAL, pick[init_sel], 0.9, "audit")
        revised = AgentPrediction(agent_id, image_id, Stage.REEVAL, pick[rev_sel], 0.9, "audit")
        predictions.extend([initial, revised])
        traces.append(
            ReEvalTrace(
                image_id=image_id,
                triggered=True,
                trust_scores={agent_id: 0.4},
                tau_used=0.7,
                votes=(ClassVote(category=pick[dec_sel], confidence=1.0),),
                rounds={agent_id: AgentRound(initial=initial, revised=revised)},
            )
        )
        decisions.append(
            FinalDecision(
                image_id=image_id,
                category=pick[dec_sel],
                confidence=0.88,
                rationale="audit fixture",
                policy=Policy.RULE_FALLBACK,
                reeval_triggered=True,
            )
        )
    return truth, predictions, traces, decisions
