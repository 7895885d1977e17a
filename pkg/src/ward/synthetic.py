"""Deterministic synthetic discharge corpora for offline tests and demos.

Letters carry every canonical section header. The two target sections are a
pure function of the chief complaint and the diagnosis list, so records with
similar retrieval contexts have similar targets. Section lengths are drawn
from log-normal distributions to give right-skewed word counts.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from datetime import datetime, timedelta

from .corpus import AuxTables, Corpus, DischargeRecord, aggregate_patient_context
from .errors import ValidationError
from .segmenter import default_specs, section_titles


@dataclass(frozen=True)
class Condition:
    complaint: str
    diagnoses: tuple[str, ...]
    terms: tuple[str, ...]
    meds: tuple[str, ...]
    imaging: tuple[str, ...]


CONDITIONS = (
    Condition("chest pain", ("NSTEMI", "Coronary artery disease", "Hyperlipidemia", "Hypertension", "Tobacco use", "Type 2 diabetes mellitus"),
              ("troponin", "ischemia", "catheterization", "stent", "heparin", "ECG", "angina", "ejection fraction"),
              ("aspirin", "atorvastatin", "metoprolol", "clopidogrel", "lisinopril"),
              ("Cardiac catheterization showed a proximal LAD lesion", "Echocardiogram with mildly reduced ejection fraction")),
    Condition("shortness of breath", ("Acute on chronic systolic heart failure", "Atrial fibrillation", "Chronic kidney disease", "Hypertension", "Obesity", "Pleural effusion"),
              ("diuresis", "furosemide", "edema", "BNP", "orthopnea", "volume overload", "weight", "crackles"),
              ("furosemide", "carvedilol", "spironolactone", "apixaban", "losartan"),
              ("Chest radiograph with pulmonary vascular congestion", "Echocardiogram with ejection fraction of 30 percent")),
    Condition("fever and cough", ("Community acquired pneumonia", "Sepsis", "COPD", "Hypoxemia", "Acute kidney injury", "Hyponatremia"),
              ("ceftriaxone", "azithromycin", "sputum", "infiltrate", "oxygen", "cultures", "lactate", "fluids"),
              ("levofloxacin", "albuterol", "tiotropium", "prednisone", "guaifenesin"),
              ("Chest radiograph with right lower lobe consolidation", "CT chest showing multifocal opacities")),
    Condition("abdominal pain", ("Acute pancreatitis", "Cholelithiasis", "Alcohol use disorder", "Hypertriglyceridemia", "Ileus", "Hypokalemia"),
              ("lipase", "bowel rest", "analgesia", "ultrasound", "cholecystectomy", "nausea", "diet", "hydration"),
              ("pantoprazole", "ondansetron", "oxycodone", "thiamine", "folic acid"),
              ("RUQ ultrasound with gallstones without cholecystitis", "CT abdomen with peripancreatic stranding")),
    Condition("weakness", ("Acute ischemic stroke", "Atrial fibrillation", "Hypertension", "Dysphagia", "Hyperlipidemia", "Carotid stenosis"),
              ("neurology", "tPA", "MRI", "deficit", "aphasia", "rehabilitation", "swallow", "telemetry"),
              ("aspirin", "atorvastatin", "apixaban", "amlodipine", "docusate"),
              ("MRI brain with acute left MCA territory infarct", "CTA head and neck with carotid narrowing")),
    Condition("hematemesis", ("Upper gastrointestinal bleed", "Peptic ulcer disease", "Acute blood loss anemia", "Cirrhosis", "Esophageal varices", "Thrombocytopenia"),
              ("endoscopy", "transfusion", "hemoglobin", "octreotide", "banding", "proton pump", "melena", "hemodynamics"),
              ("pantoprazole", "nadolol", "sucralfate", "lactulose", "iron sulfate"),
              ("EGD with clean based gastric ulcer", "Abdominal ultrasound with nodular liver")),
    Condition("fall", ("Hip fracture", "Osteoporosis", "Delirium", "Urinary tract infection", "Dementia", "Orthostatic hypotension"),
              ("orthopedics", "ORIF", "physical therapy", "weight bearing", "analgesia", "confusion", "mobility", "falls"),
              ("acetaminophen", "enoxaparin", "calcium carbonate", "vitamin D", "senna"),
              ("Pelvis radiograph with displaced femoral neck fracture", "CT head without intracranial hemorrhage")),
    Condition("hyperglycemia", ("Diabetic ketoacidosis", "Type 1 diabetes mellitus", "Acute kidney injury", "Hypokalemia", "Medication nonadherence", "Gastroparesis"),
              ("insulin drip", "anion gap", "glucose", "potassium repletion", "endocrine", "fluids", "ketones", "education"),
              ("insulin glargine", "insulin lispro", "metoclopramide", "potassium chloride", "glucagon"),
              ("Chest radiograph without acute process", "Abdominal radiograph with nonobstructive bowel gas")),
    Condition("leg swelling", ("Deep vein thrombosis", "Pulmonary embolism", "Malignancy", "Cellulitis", "Venous insufficiency", "Obesity"),
              ("anticoagulation", "heparin", "duplex", "oxygen", "CTA", "compression", "warfarin", "INR"),
              ("apixaban", "enoxaparin", "cephalexin", "furosemide", "acetaminophen"),
              ("Lower extremity duplex with occlusive femoral thrombus", "CTA chest with segmental pulmonary emboli")),
    Condition("confusion", ("Hepatic encephalopathy", "Cirrhosis", "Spontaneous bacterial peritonitis", "Ascites", "Hyponatremia", "Alcohol use disorder"),
              ("lactulose", "rifaximin", "paracentesis", "albumin", "ammonia", "hepatology", "asterixis", "diuretics"),
              ("lactulose", "rifaximin", "spironolactone", "furosemide", "ciprofloxacin"),
              ("Abdominal ultrasound with moderate ascites", "CT head without acute abnormality")),
    Condition("syncope", ("Complete heart block", "Aortic stenosis", "Hypertension", "Chronic kidney disease", "Anemia", "Dehydration"),
              ("pacemaker", "telemetry", "electrophysiology", "orthostatics", "echocardiogram", "bradycardia", "monitoring", "fluids"),
              ("metoprolol", "amlodipine", "aspirin", "ferrous sulfate", "atorvastatin"),
              ("Echocardiogram with severe aortic stenosis", "CT head without hemorrhage")),
    Condition("dysuria and flank pain", ("Pyelonephritis", "Sepsis", "Nephrolithiasis", "Acute kidney injury", "Type 2 diabetes mellitus", "Bacteremia"),
              ("urine culture", "ceftriaxone", "urology", "stent", "hydronephrosis", "fluids", "blood cultures", "antibiotics"),
              ("ciprofloxacin", "tamsulosin", "oxycodone", "metformin", "ondansetron"),
              ("CT abdomen with obstructing left ureteral stone", "Renal ultrasound with mild hydronephrosis")),
)

GENERIC = (
    "the patient", "was admitted", "was monitored", "remained stable", "improved", "was started on", "was continued on",
    "tolerated", "without complication", "overnight", "on hospital day two", "with close monitoring", "per the team",
    "was evaluated by", "labs were notable for", "symptoms resolved", "at baseline", "was discharged", "follow up with",
    "primary care", "vital signs", "as an outpatient", "history of", "presented with", "further workup", "was consulted",
)
LAY = (
    "you were", "in the hospital", "please take", "your medicines", "as prescribed", "call your doctor", "if you have",
    "we treated", "you improved", "please follow up", "with your doctor", "it is important", "to rest", "drink fluids",
    "avoid heavy lifting", "your symptoms", "get better", "come back", "to the emergency room", "any questions",
)
RACES = ("WHITE", "BLACK/AFRICAN AMERICAN", "HISPANIC/LATINO", "ASIAN", "OTHER", "UNKNOWN")
UNITS = ("Emergency Department", "Medicine", "Medical Intensive Care Unit", "Cardiology", "Neurology", "Surgery", "Observation")
SERVICES = ("MEDICINE", "SURGERY", "NEUROLOGY", "CARDIOLOGY", "ORTHOPAEDICS")
DISPOSITIONS = ("Home", "Home With Service", "Extended Care", "Rehabilitation Facility")
CONDITION_TEXT = (
    "Mental Status Clear and coherent\nLevel of Consciousness Alert and interactive\nActivity Status Ambulatory - Independent",
    "Mental Status Confused - sometimes\nLevel of Consciousness Lethargic but arousable\nActivity Status Ambulatory - requires assistance",
)


def stable_seed(*parts: object) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _lognormal_len(rng: random.Random, mu: float, sigma: float, lo: int, hi: int) -> int:
    return int(min(hi, max(lo, round(rng.lognormvariate(mu, sigma)))))


def _filler(rng: random.Random, pool: tuple[str, ...], n_words: int) -> str:
    """Sentences built from ``pool`` totalling about ``n_words`` words."""
    words: list[str] = []
    sentences = []
    while len(words) < n_words:
        k = rng.randint(2, 4)
        chunk = " ".join(rng.choice(pool) for _ in range(k)).split()
        words.extend(chunk)
        sentences.append(" ".join(chunk).capitalize() + ".")
    return " ".join(sentences)


def bhc_target(cond: Condition, diagnoses: tuple[str, ...]) -> str:
    rng = random.Random(stable_seed("bhc", cond.complaint, *diagnoses))
    n_words = _lognormal_len(rng, 5.3, 0.6, 25, 2000)
    pool = GENERIC + cond.terms + cond.meds
    lines = ["# Introduction", f"___ is a ___ year old patient who presented with {cond.complaint}."]
    budget = n_words - 12
    per = max(4, budget // (len(diagnoses) + 1))
    lines.append("# Active Issues")
    for dx in diagnoses:
        lines.append(f"# {dx}")
        lines.append(f"- {_filler(rng, pool, per)}")
    lines.append("# Transitional Issues")
    lines.append(f"- {_filler(rng, pool, max(4, budget - per * len(diagnoses)))}")
    return "\n".join(lines)


def di_target(cond: Condition, diagnoses: tuple[str, ...]) -> str:
    rng = random.Random(stable_seed("di", cond.complaint, *diagnoses))
    n_words = _lognormal_len(rng, 4.9, 0.45, 30, 1200)
    pool = LAY + cond.meds
    third = max(4, (n_words - 40) // 3)
    return "\n".join(
        [
            "Dear ___,",
            "It was a pleasure taking care of you at ___.",
            "WHY WAS I ADMITTED TO THE HOSPITAL?",
            f"- You were admitted because of {cond.complaint}. {_filler(rng, pool, third)}",
            "WHAT HAPPENED WHILE I WAS IN THE HOSPITAL?",
            f"- We treated your {diagnoses[0].lower()}. {_filler(rng, pool, third)}",
            "WHAT SHOULD I DO WHEN I GO HOME?",
            f"- {_filler(rng, pool, third)}",
            "We wish you the best!",
            "Your ___ Team",
        ]
    )


@dataclass(frozen=True)
class SyntheticCorpus:
    corpus: Corpus
    aux: dict[str, list[dict[str, str]]]
    truth: dict[str, dict[str, str]]

    def aux_tables(self) -> AuxTables:
        return AuxTables(self.aux)


def _ts(dt: datetime) -> str:
    return dt.strftime("%Y-%m-%d %H:%M:%S")


def _draw_case(rng: random.Random):
    cond = rng.choice(CONDITIONS)
    k = rng.randint(2, 4)
    picked = sorted(rng.sample(range(len(cond.diagnoses)), k))
    return cond, tuple(cond.diagnoses[i] for i in picked)


def _context_sections(rng: random.Random, cond: Condition, diagnoses: tuple[str, ...]) -> dict[str, str]:
    """Sections that feed retrieval contexts; shared verbatim between twins."""
    pool = GENERIC + cond.terms
    hpi_words = _lognormal_len(rng, 4.6, 0.5, 15, 800)
    meds = rng.sample(cond.meds, 3)
    return {
        "chief_complaint": cond.complaint.capitalize(),
        "history_of_present_illness": f"___ with history of {diagnoses[-1].lower()} presents with {cond.complaint}. "
        + _filler(rng, pool, hpi_words),
        "admission_medications": "\n".join(f"{i}. {m}" for i, m in enumerate(meds[:2], start=1)),
        "discharge_medications": "\n".join(f"{i}. {m}" for i, m in enumerate(meds, start=1)),
        "discharge_disposition": rng.choice(DISPOSITIONS),
        "discharge_diagnoses": "Primary diagnosis\n" + "\n".join(diagnoses),
        "discharge_condition": rng.choice(CONDITION_TEXT),
    }


def generate_synthetic_corpus(seed: int, n: int, twins: bool = False, imaging_empty_rate: float = 0.3) -> SyntheticCorpus:
    """Generate ``n`` synthetic admissions with matching auxiliary tables.

    With ``twins=True`` records come in consecutive pairs that share their
    clinical case and retrieval-context sections (hence identical targets)
    but differ in demographics and the remaining sections.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    rng = random.Random(seed)
    specs = default_specs()
    titles = section_titles(specs)
    aux: dict[str, list[dict[str, str]]] = {k: [] for k in ("patients", "admissions", "diagnoses", "transfers", "radiology")}
    letters: list[tuple[str, dict[str, str]]] = []
    notes_by_id: dict[str, tuple[str, ...]] = {}

    shared = None
    for i in range(n):
        hid = str(20000000 + i * 7 + 1)
        subject = str(10000000 + i)
        if twins and i % 2 == 1 and shared is not None:
            cond, diagnoses, ctx = shared
            shared = None
        else:
            cond, diagnoses = _draw_case(rng)
            ctx = _context_sections(rng, cond, diagnoses)
            shared = (cond, diagnoses, ctx)

        admit = datetime(2110, 1, 1) + timedelta(days=rng.randint(0, 80 * 365), minutes=rng.randint(0, 1439))
        hours = _lognormal_len(rng, 4.2, 0.7, 4, 2000) + rng.randint(0, 59) / 60
        disch = admit + timedelta(hours=hours)
        anchor_year = admit.year - rng.randint(0, 3)
        aux["patients"].append({"subject_id": subject, "gender": rng.choice("MF"),
                                "anchor_age": str(rng.randint(18, 91)), "anchor_year": str(anchor_year)})
        aux["admissions"].append({"subject_id": subject, "hadm_id": hid, "admittime": _ts(admit),
                                  "dischtime": _ts(disch), "race": rng.choice(RACES)})
        for seq, dx in enumerate(diagnoses, start=1):
            aux["diagnoses"].append({"subject_id": subject, "hadm_id": hid, "seq_num": str(seq), "long_title": dx})

        n_transfers = rng.randint(1, 4)
        cuts = sorted(rng.uniform(0, hours) for _ in range(n_transfers - 1))
        starts = [0.0] + cuts
        ends = cuts + [hours]
        moves = []
        for j, (s, e) in enumerate(zip(starts, ends)):
            moves.append({"subject_id": subject, "hadm_id": hid, "eventtype": "ED" if j == 0 else "transfer",
                          "careunit": UNITS[0] if j == 0 else rng.choice(UNITS[1:]),
                          "intime": _ts(admit + timedelta(hours=s)), "outtime": _ts(admit + timedelta(hours=e))})
        rng.shuffle(moves)
        aux["transfers"].extend(moves)

        notes = tuple(f"{rng.choice(cond.imaging)}." for _ in range(rng.randint(0, 2)))
        for note in notes:
            aux["radiology"].append({"subject_id": subject, "hadm_id": hid, "text": note})
        notes_by_id[hid] = notes

        pool = GENERIC + cond.terms
        sections = {
            "service": rng.choice(SERVICES),
            "allergies": rng.choice(("No Known Allergies / Adverse Drug Reactions", "Penicillins", "Sulfa (Sulfonamide Antibiotics)")),
            "attending": "___",
            "chief_complaint": ctx["chief_complaint"],
            "major_surgical_procedure": rng.choice(("None", "Cardiac catheterization", "Paracentesis", "EGD", "ORIF")),
            "history_of_present_illness": ctx["history_of_present_illness"],
            "review_of_systems": "Negative except as noted in HPI.",
            "past_medical_history": "\n".join(f"- {d}" for d in diagnoses[1:]) + f"\n- {rng.choice(('Hypothyroidism', 'GERD', 'Depression', 'Gout'))}",
            "social_history": "___",
            "family_history": rng.choice(("Noncontributory.", "Mother with hypertension.", "Father with coronary disease.")),
            "physical_exam": "ADMISSION EXAM\n" + _filler(rng, pool, _lognormal_len(rng, 3.8, 0.4, 10, 300)),
            "pertinent_results": _filler(rng, ("WBC 7.2", "Hgb 11.9", "Plt 212", "Na 138", "K 4.1", "Cr 1.1", "BUN 18") + cond.terms,
                                         _lognormal_len(rng, 3.7, 0.5, 8, 400)),
            "imaging_and_studies": "" if rng.random() < imaging_empty_rate else f"{rng.choice(cond.imaging)}.",
            "brief_hospital_course": bhc_target(cond, diagnoses),
            "admission_medications": ctx["admission_medications"],
            "discharge_medications": ctx["discharge_medications"],
            "discharge_disposition": ctx["discharge_disposition"],
            "discharge_diagnoses": ctx["discharge_diagnoses"],
            "discharge_condition": ctx["discharge_condition"],
            "discharge_instructions": di_target(cond, diagnoses),
            "followup_instructions": "___",
            "provider": "___",
            "code_status": rng.choice(("Full code", "DNR/DNI")),
        }
        letters.append((hid, sections))

    aux_tables = AuxTables(aux)
    records = []
    truth: dict[str, dict[str, str]] = {}
    for hid, sections in letters:
        admission = aggregate_patient_context(hid, aux_tables)
        full = {
            "patient_admissions": admission.render_admission(),
            "transfer_summary": admission.render_transfers(),
            "diagnoses": admission.render_diagnoses(),
            **sections,
        }
        ordered = {s.canonical_name: full[s.canonical_name] for s in specs}
        text = _render_letter(ordered, titles)
        truth[hid] = ordered
        records.append(DischargeRecord(hadm_id=hid, text=text, admission=admission, radiology_notes=notes_by_id[hid]))
    return SyntheticCorpus(corpus=Corpus(records=tuple(records)), aux=aux, truth=truth)


_INLINE = {"service", "allergies", "attending", "discharge_disposition"}
_LETTER_ORDER = (
    "patient_admissions", "transfer_summary", "diagnoses", "service", "allergies", "attending", "chief_complaint",
    "major_surgical_procedure", "history_of_present_illness", "review_of_systems", "past_medical_history",
    "social_history", "family_history", "physical_exam", "pertinent_results", "imaging_and_studies",
    "brief_hospital_course", "admission_medications", "discharge_medications", "discharge_disposition",
    "discharge_diagnoses", "discharge_condition", "discharge_instructions", "followup_instructions", "provider",
    "code_status",
)


def _render_letter(sections: dict[str, str], titles: dict[str, str]) -> str:
    out = [" \nName:  ___                     Unit No:   ___\n \nAdmission Date:  ___              Discharge Date:   ___\n \n"]
    for name in _LETTER_ORDER:
        body = sections[name]
        title = titles[name]
        if name in _INLINE:
            out.append(f"{title}: {body}\n \n")
        else:
            out.append(f"{title}:\n{body}\n\n")
    return "".join(out)
