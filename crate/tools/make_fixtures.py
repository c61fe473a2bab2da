#!/usr/bin/env python3
"""Generate the deterministic evaluation fixtures under fixtures/.

Writes a synthetic CDE corpus export, source data dictionaries, a normalized
gold-standard CSV and the datasets manifest. The gold sets follow the
structure of the four evaluation datasets (dictionary sizes and the number of
1-vs-1, M-vs-1 and 1-vs-M entries) and include their example mappings.

Usage: python3 tools/make_fixtures.py [--out fixtures]
"""

import argparse
import csv
import json
import random
import string
from pathlib import Path

SEED = 20241016

VALUE_SETS = {
    "race": ["American Indian or Alaska Native", "Asian", "Black or African American",
             "Native Hawaiian or Other Pacific Islander", "White", "More than one race", "Unknown", "Not reported"],
    "ethnicity": ["Hispanic or Latino", "Not Hispanic or Latino", "Unknown", "Not reported"],
    "sex": ["Female", "Male", "Intersex", "Unknown"],
    "yesno": ["Yes", "No", "Unknown"],
    "laterality": ["Right", "Left", "Bilateral", "Unknown"],
    "severity": ["None", "Mild", "Moderate", "Severe"],
    "frequency": ["Never", "Rarely", "Sometimes", "Often", "Always"],
    "imaging": ["CT", "MRI", "CT angiography", "MR angiography", "Ultrasound", "PET"],
    "stroke": ["Ischemic stroke", "Intracerebral hemorrhage", "Subarachnoid hemorrhage", "Transient ischemic attack"],
    "education": ["Less than high school", "High school graduate", "Some college", "Bachelor's degree", "Graduate degree"],
    "marital": ["Married", "Never married", "Divorced", "Widowed", "Separated"],
    "employment": ["Employed full time", "Employed part time", "Unemployed", "Retired", "Student"],
    "test_result": ["Positive", "Negative", "Inconclusive", "Not tested"],
    "vaccine": ["Pfizer-BioNTech", "Moderna", "Johnson & Johnson", "Novavax", "Other"],
    "smoking": ["Current smoker", "Former smoker", "Never smoker", "Unknown"],
    "apoe": ["e2/e2", "e2/e3", "e2/e4", "e3/e3", "e3/e4", "e4/e4"],
    "braak": ["Stage 0", "Stage I", "Stage II", "Stage III", "Stage IV", "Stage V", "Stage VI"],
    "cerad": ["None", "Sparse", "Moderate", "Frequent"],
    "handedness": ["Right", "Left", "Ambidextrous"],
    "insurance": ["Private", "Medicare", "Medicaid", "Uninsured", "Other"],
}

# (name, definition phrase, value set key or None, synonyms)
DEMOGRAPHICS = [
    ("Race", "self-reported race of the participant", "race", ["racial category"]),
    ("Ethnicity", "self-reported ethnicity of the participant", "ethnicity", ["ethnic origin"]),
    ("Sex at birth", "sex assigned to the participant at birth", "sex", ["birth sex"]),
    ("Gender identity", "participant's current gender identity", None, ["gender"]),
    ("Birth date", "date on which the participant was born", None, ["date of birth", "DOB"]),
    ("Age", "age of the participant in years at enrollment", None, ["participant age"]),
    ("Marital status", "current legal marital status", "marital", ["relationship status"]),
    ("Education level", "highest level of formal education completed", "education", ["schooling"]),
    ("Employment status", "current employment situation", "employment", ["work status"]),
    ("Household income", "total annual income of the household", None, ["family income"]),
    ("Primary language", "language most often spoken at home", None, ["home language"]),
    ("Health insurance type", "type of health insurance coverage", "insurance", ["insurance coverage"]),
    ("Country of birth", "country in which the participant was born", None, ["birth country"]),
    ("Veteran status", "whether the participant served in the armed forces", "yesno", ["military service"]),
    ("Zip code", "postal code of the primary residence", None, ["postal code"]),
    ("Height", "standing body height measured in centimeters", None, ["body height"]),
    ("Weight", "body weight measured in kilograms", None, ["body weight"]),
    ("Body mass index", "weight in kilograms divided by height in meters squared", None, ["BMI"]),
]

EYE = [
    ("Visual acuity", "best corrected visual acuity measured with an eye chart", None, ["VA", "sharpness of vision"]),
    ("Intraocular pressure", "fluid pressure inside the eye measured by tonometry", None, ["IOP", "eye pressure"]),
    ("Refractive error spherical equivalent", "spherical equivalent of the refractive error in diopters", None, ["refraction"]),
    ("Cup-to-disc ratio", "ratio of optic cup diameter to optic disc diameter", None, ["CDR", "optic nerve cupping"]),
    ("Central macular thickness", "retinal thickness at the central macula measured by OCT", None, ["macular thickness"]),
    ("Cataract grade", "severity grade of lens opacity", "severity", ["lens opacity grade"]),
    ("Retinal detachment indicator", "whether a retinal detachment is present", "yesno", ["detached retina"]),
    ("Diabetic retinopathy severity", "severity level of diabetic retinopathy", "severity", ["DR grade"]),
    ("Glaucoma diagnosis", "whether glaucoma has been diagnosed", "yesno", ["glaucoma"]),
    ("Central corneal thickness", "thickness of the central cornea measured by pachymetry", None, ["CCT", "pachymetry"]),
    ("Axial length", "length of the eye from cornea to retina", None, ["eye length"]),
    ("Visual field mean deviation", "mean deviation of the visual field test", None, ["perimetry MD"]),
    ("Color vision test result", "result of the color vision plate test", None, ["color blindness test"]),
    ("Eye laterality", "which eye the measurement refers to", "laterality", ["study eye"]),
    ("Contact lens use", "whether the participant wears contact lenses", "yesno", ["contacts"]),
    ("Eye surgery history", "history of prior ocular surgery", "yesno", ["ocular surgery"]),
    ("Amblyopia indicator", "whether amblyopia is present", "yesno", ["lazy eye"]),
    ("Strabismus type", "type of ocular misalignment", None, ["squint"]),
    ("Pupil reaction", "reaction of the pupil to light", None, ["pupillary response"]),
    ("Age-related macular degeneration stage", "clinical stage of AMD", "severity", ["AMD stage"]),
    ("Dry eye symptom score", "score on the dry eye symptom questionnaire", None, ["OSDI"]),
    ("Eyeglasses use", "whether the participant wears eyeglasses", "yesno", ["spectacles"]),
]

STROKE = [
    ("Imaging Modality Type", "type of imaging modality used for the examination", "imaging", ["scan type"]),
    ("Stroke type", "classification of the stroke event", "stroke", ["stroke subtype"]),
    ("NIH Stroke Scale total score", "total score on the NIH Stroke Scale", None, ["NIHSS"]),
    ("Modified Rankin Scale score", "global disability score on the modified Rankin Scale", None, ["mRS"]),
    ("Glasgow Coma Scale total score", "total score of the Glasgow Coma Scale", None, ["GCS"]),
    ("Blood pressure systolic", "systolic blood pressure in mmHg", None, ["SBP"]),
    ("Blood pressure diastolic", "diastolic blood pressure in mmHg", None, ["DBP"]),
    ("Atrial fibrillation indicator", "whether atrial fibrillation is present", "yesno", ["AF", "afib"]),
    ("Thrombolysis administered indicator", "whether intravenous thrombolysis was given", "yesno", ["tPA given"]),
    ("Stroke onset time", "time at which stroke symptoms began", None, ["last known well"]),
    ("Infarct volume", "volume of infarcted tissue in milliliters", None, ["lesion volume"]),
    ("Hemorrhage location", "anatomical location of the hemorrhage", None, ["bleed site"]),
    ("Lesion side", "hemisphere in which the lesion is located", "laterality", ["lesion laterality"]),
    ("Smoking status", "cigarette smoking status", "smoking", ["tobacco smoking"]),
    ("Hypertension history", "history of high blood pressure", "yesno", ["high blood pressure history"]),
    ("Diabetes mellitus history", "history of diabetes mellitus", "yesno", ["diabetes"]),
    ("Hyperlipidemia history", "history of elevated blood lipids", "yesno", ["high cholesterol"]),
    ("Anticoagulant use", "current use of anticoagulant medication", "yesno", ["blood thinner"]),
    ("Barthel Index total score", "total score of the Barthel Index of activities of daily living", None, ["ADL score"]),
    ("Aphasia indicator", "whether aphasia is present", "yesno", ["language impairment"]),
    ("Seizure indicator", "whether a seizure occurred", "yesno", ["convulsion"]),
    ("Headache severity", "severity of headache", "severity", ["head pain"]),
    ("Door to needle time", "minutes from hospital arrival to thrombolysis", None, ["DTN"]),
    ("Carotid stenosis percentage", "degree of carotid artery narrowing", None, ["carotid narrowing"]),
]

ADRD = [
    ("Lewy body pathology indicator", "whether Lewy body pathology is present at autopsy", "yesno", ["Lewy bodies"]),
    ("Amyloid plaque density", "density of amyloid plaques", "cerad", ["plaque density"]),
    ("Neurofibrillary tangle Braak stage", "Braak stage of neurofibrillary tangles", "braak", ["Braak stage"]),
    ("CERAD neuritic plaque score", "CERAD semiquantitative neuritic plaque score", "cerad", ["neuritic plaques"]),
    ("Mini-Mental State Examination total score", "total score on the MMSE", None, ["MMSE"]),
    ("Montreal Cognitive Assessment total score", "total score on the MoCA", None, ["MoCA"]),
    ("Clinical Dementia Rating global score", "global score of the Clinical Dementia Rating", None, ["CDR global"]),
    ("APOE genotype", "apolipoprotein E genotype", "apoe", ["ApoE alleles"]),
    ("Hippocampal sclerosis indicator", "whether hippocampal sclerosis is present", "yesno", ["HS"]),
    ("TDP-43 pathology stage", "stage of TDP-43 proteinopathy", None, ["LATE stage"]),
    ("Cerebral amyloid angiopathy severity", "severity of cerebral amyloid angiopathy", "severity", ["CAA"]),
    ("Parkinsonism indicator", "whether parkinsonism is present", "yesno", ["parkinsonian signs"]),
    ("Visual hallucinations indicator", "whether visual hallucinations occur", "yesno", ["hallucinations"]),
    ("REM sleep behavior disorder indicator", "whether REM sleep behavior disorder is present", "yesno", ["RBD"]),
    ("Brain weight", "weight of the brain at autopsy in grams", None, ["brain mass"]),
    ("Postmortem interval", "hours between death and autopsy", None, ["PMI"]),
    ("Family history of dementia", "whether a first degree relative had dementia", "yesno", ["dementia in family"]),
    ("Years of education", "number of years of formal education", None, ["education years"]),
    ("Handedness", "dominant hand", "handedness", ["hand dominance"]),
    ("Depression diagnosis", "whether depression has been diagnosed", "yesno", ["depressive disorder"]),
    ("Gait disturbance indicator", "whether a gait disturbance is present", "yesno", ["walking difficulty"]),
    ("Frontotemporal lobar degeneration subtype", "neuropathologic subtype of FTLD", None, ["FTLD subtype"]),
    ("Cognitive status", "overall cognitive diagnosis", None, ["cognitive diagnosis"]),
    ("Age at death", "age of the participant at death", None, ["death age"]),
    ("Vascular brain injury indicator", "whether vascular brain injury is present", "yesno", ["infarcts"]),
    ("Arteriolosclerosis severity", "severity of arteriolosclerosis", "severity", ["small vessel disease"]),
    ("Atherosclerosis of circle of Willis", "severity of circle of Willis atherosclerosis", "severity", ["intracranial atherosclerosis"]),
    ("Alzheimer disease neuropathologic change", "ABC score of Alzheimer neuropathologic change", None, ["ADNC"]),
    ("Substantia nigra neuronal loss", "degree of neuronal loss in the substantia nigra", "severity", ["nigral loss"]),
    ("Functional Activities Questionnaire score", "total score of the FAQ", None, ["FAQ"]),
    ("Geriatric Depression Scale score", "total score of the GDS", None, ["GDS"]),
    ("Neuropsychiatric Inventory severity", "severity score of the NPI-Q", None, ["NPI-Q"]),
    ("Trail Making Test Part B time", "seconds to complete Trail Making Test Part B", None, ["TMT-B"]),
    ("Logical memory delayed recall", "delayed recall score on the logical memory test", None, ["story recall"]),
    ("Animal naming score", "number of animals named in one minute", None, ["category fluency"]),
    ("Boston Naming Test score", "score on the Boston Naming Test", None, ["BNT"]),
]

COVID = [
    ("COVID-19 test result", "result of the most recent COVID-19 test", "test_result", ["SARS-CoV-2 test result"]),
    ("COVID-19 test date", "date of the most recent COVID-19 test", None, ["test date"]),
    ("COVID-19 test type", "type of COVID-19 test performed", None, ["PCR or antigen"]),
    ("COVID-19 vaccination status", "whether the participant received a COVID-19 vaccine", "yesno", ["vaccinated"]),
    ("COVID-19 vaccine manufacturer", "manufacturer of the COVID-19 vaccine received", "vaccine", ["vaccine brand"]),
    ("Number of COVID-19 vaccine doses", "number of vaccine doses received", None, ["doses received"]),
    ("Symptom onset date", "date on which COVID-19 symptoms began", None, ["onset date"]),
    ("Fever indicator", "whether the participant had a fever", "yesno", ["fever"]),
    ("Cough indicator", "whether the participant had a cough", "yesno", ["cough"]),
    ("Shortness of breath indicator", "whether the participant had difficulty breathing", "yesno", ["dyspnea"]),
    ("Loss of taste or smell indicator", "whether the participant lost taste or smell", "yesno", ["anosmia"]),
    ("Hospitalization indicator", "whether the participant was hospitalized", "yesno", ["admitted to hospital"]),
    ("Intensive care unit admission", "whether the participant was admitted to the ICU", "yesno", ["ICU stay"]),
    ("Mechanical ventilation indicator", "whether mechanical ventilation was required", "yesno", ["ventilator"]),
    ("Oxygen saturation", "peripheral oxygen saturation percentage", None, ["SpO2"]),
    ("Household size", "number of people living in the household", None, ["people in home"]),
    ("Essential worker status", "whether the participant is an essential worker", "yesno", ["frontline worker"]),
    ("Mask wearing frequency", "how often a face mask is worn in public", "frequency", ["face covering use"]),
    ("Social distancing frequency", "how often social distancing is practiced", "frequency", ["physical distancing"]),
    ("Quarantine status", "whether the participant is in quarantine", "yesno", ["isolation"]),
    ("Food insecurity", "worry that food would run out before money to buy more", "frequency", ["food security"]),
    ("Housing instability", "risk of losing stable housing", "yesno", ["housing insecurity"]),
    ("Generalized Anxiety Disorder 7 score", "total GAD-7 anxiety score", None, ["GAD-7"]),
    ("Patient Health Questionnaire 9 score", "total PHQ-9 depression score", None, ["PHQ-9"]),
    ("Alcohol use frequency", "how often alcoholic drinks are consumed", "frequency", ["drinking frequency"]),
    ("Tobacco use", "current use of tobacco products", "smoking", ["smoking"]),
    ("Health care access", "ability to obtain needed medical care", "yesno", ["access to care"]),
    ("Transportation access", "lack of transportation kept the participant from appointments", "yesno", ["transport barrier"]),
    ("Loneliness frequency", "how often the participant feels lonely", "frequency", ["social isolation"]),
    ("Trust in vaccine safety", "level of trust in the safety of vaccines", "frequency", ["vaccine confidence"]),
    ("Vaccine hesitancy reason", "main reason for not getting vaccinated", None, ["reason unvaccinated"]),
    ("Long COVID symptoms indicator", "symptoms lasting more than four weeks after infection", "yesno", ["post-COVID condition"]),
    ("Telehealth use", "whether telehealth visits were used", "yesno", ["virtual visit"]),
    ("Childcare disruption", "whether childcare was disrupted", "yesno", ["school closure impact"]),
    ("Job loss due to pandemic", "whether a job was lost because of the pandemic", "yesno", ["pandemic unemployment"]),
    ("Internet access", "whether the household has internet access", "yesno", ["broadband"]),
    ("Number of COVID-19 tests taken", "number of COVID-19 tests taken to date", None, ["tests taken"]),
    ("Close contact with COVID-19 case", "close contact with a confirmed case", "yesno", ["exposure"]),
    ("Perceived risk of infection", "perceived likelihood of getting infected", "severity", ["infection risk perception"]),
    ("Difficulty paying bills", "difficulty paying for basic needs", "frequency", ["financial strain"]),
]

QUALIFIERS = [
    ("date", "date of the {x}", None),
    ("assessment method", "method used to assess the {x}", None),
    ("indicator", "indicator of whether the {x} is recorded", "yesno"),
    ("unit of measure", "unit in which the {x} is recorded", None),
    ("at baseline", "{x} recorded at the baseline visit", None),
    ("at follow-up", "{x} recorded at the follow-up visit", None),
    ("right eye", "{x} for the right eye", None),
    ("left eye", "{x} for the left eye", None),
    ("change from baseline", "change in {x} since baseline", None),
    ("status", "status of the {x}", None),
    ("source", "source from which the {x} was obtained", None),
    ("reported by proxy", "{x} as reported by a proxy informant", None),
    ("category", "category of the {x}", None),
    ("other specify", "free text specification of other {x}", None),
]

DEFINITION_TEMPLATES = [
    "The {p}.",
    "Indicates the {p}.",
    "A measure of the {p}.",
    "Documents the {p}.",
    "Recorded value for the {p}.",
]

def definition_text(template, phrase):
    text = template.format(p=phrase).replace("the whether", "whether")
    return text[0].upper() + text[1:]


QUESTION_TEMPLATES = ["What is the {n}?", "Please record the {n}.", "{N}:"]

DISTRACTOR_COLLECTIONS = ["NCI", "NIDA", "NIMH", "NHLBI"]

UNMAPPABLE = [
    "Study visit number", "Form completed by", "Technician initials", "Scanner serial number", "Data entry date",
    "Site identifier", "Record status", "Comments", "Protocol version", "Consent form version",
    "Randomization number", "Case report form page", "Query resolution flag", "Monitor initials",
    "Device calibration date", "Batch number", "Specimen barcode", "Freezer location", "Shipping date",
    "Reviewer notes", "Image file name", "Visit window flag", "Source document verified", "Data lock date",
    "Coordinator name", "Payment issued", "Reminder sent", "Transport voucher", "Parking validated",
    "Questionnaire version", "Language of administration", "Interviewer ID", "Call attempt count",
    "Time zone", "Record created by", "Last modified", "Sequence number", "Import batch", "Export flag",
    "Instrument serial", "Room number", "Lab accession", "Audit flag", "Eligibility checklist version",
]

ABBREVIATIONS = {
    "blood pressure": "BP", "visual acuity": "VA", "intraocular pressure": "IOP", "date of birth": "DOB",
    "body mass index": "BMI", "intensive care unit": "ICU", "number": "No.", "total score": "total",
}


def tiny_id(rng, used):
    alphabet = string.ascii_letters + string.digits
    while True:
        t = "".join(rng.choice(alphabet) for _ in range(9))
        if t not in used:
            used.add(t)
            return t


def lower_first(s):
    return s[0].lower() + s[1:] if s and not s[:2].isupper() else s


class Corpus:
    def __init__(self, rng):
        self.rng = rng
        self.used = set()
        self.records = []
        self.by_concept = {}

    def add(self, name, phrase, values, synonyms, collection, concept):
        rng = self.rng
        tid = tiny_id(rng, self.used)
        rec = {
            "tinyId": tid,
            "name": name,
            "designations": list(synonyms[: rng.randint(0, len(synonyms))]),
            "questionTexts": [rng.choice(QUESTION_TEMPLATES).format(n=lower_first(name), N=name)],
            "definition": definition_text(rng.choice(DEFINITION_TEMPLATES), phrase),
            "collection": collection,
            "permissibleValues": [{"valueName": v} for v in VALUE_SETS[values]] if values else [],
            "detailUrl": f"https://cde.nlm.nih.gov/deView?tinyId={tid}",
        }
        self.records.append(rec)
        self.by_concept.setdefault(concept, []).append(rec)
        return rec


def build_corpus(rng):
    corpus = Corpus(rng)
    domains = [
        ("demo", DEMOGRAPHICS, ["NIH-Endorsed", "Project 5 (COVID-19)", "NINDS", "NEI"]),
        ("eye", EYE, ["NEI", "NIH-Endorsed"]),
        ("stroke", STROKE, ["NINDS", "NIH-Endorsed"]),
        ("adrd", ADRD, ["NINDS", "NIH-Endorsed"]),
        ("covid", COVID, ["Project 5 (COVID-19)", "NIH-Endorsed"]),
    ]
    for domain, concepts, home in domains:
        for name, phrase, values, syns in concepts:
            concept = f"{domain}:{name}"
            # The canonical element lives in the first home collection; the
            # coverage-table examples pin a specific collection.
            primary = home[0]
            if name in ("Race",):
                primary = "NIH-Endorsed"
            if name == "Ethnicity":
                primary = "Project 5 (COVID-19)"
            corpus.add(name, phrase, values, syns, primary, concept)
            # near-duplicates in other collections
            for coll in rng.sample(home[1:] + DISTRACTOR_COLLECTIONS, rng.randint(1, 3)):
                variant = name
                if name in ("Race", "Ethnicity") and coll in ("NIH-Endorsed", "Project 5 (COVID-19)", "NINDS", "NEI"):
                    variant = f"{name} category"
                elif rng.random() < 0.5:
                    variant = f"{name} {rng.choice(['type', 'code', 'reported', 'detail'])}"
                corpus.add(variant, phrase, values, syns, coll, concept)
            # qualified variants
            for q, qdef, qvalues in rng.sample(QUALIFIERS, rng.randint(6, 11)):
                if ("eye" in q) and domain != "eye":
                    continue
                if set(q.lower().split()) & set(name.lower().replace("-", " ").split()):
                    continue
                coll = primary if rng.random() < 0.6 else rng.choice(home + DISTRACTOR_COLLECTIONS)
                qphrase = qdef.format(x=phrase)
                corpus.add(f"{name} {q}", qphrase, qvalues or values, [], coll, concept + "|" + q)
    corpus.add("Lewy body pathology indicator", "whether Lewy body pathology was found in any region", "yesno",
               [], "NCI", "adrd:Lewy body pathology indicator|nci")
    return corpus


def abbreviate(text):
    low = text.lower()
    for long, short in ABBREVIATIONS.items():
        if long in low:
            i = low.index(long)
            return text[:i] + short + text[i + len(long):]
    return text


def noisy_name(rng, target):
    name = target["name"]
    r = rng.random()
    if r < 0.30:
        return name
    if r < 0.45 and target["designations"]:
        return rng.choice(target["designations"]).capitalize()
    if r < 0.60:
        return abbreviate(name)
    if r < 0.75:
        return "_".join(w.lower() for w in name.replace("-", " ").split())
    words = name.split()
    if r < 0.88 and len(words) > 2:
        words.pop(rng.randrange(1, len(words)))
        return " ".join(words)
    return name + " " + rng.choice(["(self-report)", "value", "recorded", "v2"])


def noisy_description(rng, target):
    d = target["definition"].rstrip(".")
    if not d or rng.random() < 0.2:
        return ""
    words = d.split()
    keep = max(3, int(len(words) * rng.uniform(0.5, 1.0)))
    return " ".join(words[:keep])


def source_values(rng, target):
    vals = [v["valueName"] for v in target["permissibleValues"]]
    if not vals or rng.random() < 0.3:
        return []
    style = rng.random()
    if style < 0.5:
        return vals
    if style < 0.8:
        return [v.upper() for v in vals]
    return [f"{i}={v}" for i, v in enumerate(vals)]


SPLITTERS = {
    "race": lambda t: [f"{t['name']}-{v['valueName']}" for v in t["permissibleValues"][:5]],
    "laterality": lambda t: [f"{t['name']} right eye", f"{t['name']} left eye", f"{t['name']} OD", f"{t['name']} OS"],
    "visit": lambda t: [f"{t['name']} visit {i}" for i in range(1, 6)],
    "time": lambda t: [f"{t['name']} at {w}" for w in ["screening", "month 3", "month 6", "month 12", "exit"]],
}


def make_dataset(rng, corpus, spec, pinned):
    """Return gold entries (name, description, values, targets) for one dataset."""
    name, collections, n11, nm1, n1m, domains = spec
    pool = [r for r in corpus.records
            if r["collection"] in collections and any(r_domain(corpus, r) == d for d in domains)]
    rng.shuffle(pool)
    taken = set()
    entries = []

    def take(pred=lambda r: True):
        for r in pool:
            if r["tinyId"] not in taken and pred(r):
                taken.add(r["tinyId"])
                return r
        raise RuntimeError(f"{name}: target pool exhausted")

    # pinned coverage-table examples
    for kind, src, target_name, target_coll in pinned:
        t = next(r for r in corpus.records if r["name"] == target_name and r["collection"] == target_coll)
        taken.add(t["tinyId"])
        if kind == "m1":
            srcs = SPLITTERS["race"](t)
            for s, v in zip(srcs, t["permissibleValues"]):
                entries.append(("m1", s, f"Participant race: {v['valueName']}", [v["valueName"]], [t["tinyId"]]))
        else:
            entries.append((kind, src, noisy_description(rng, t), source_values(rng, t), [t["tinyId"]]))

    def count(kind):
        return sum(1 for e in entries if e[0] == kind)

    while count("11") < n11:
        t = take()
        entries.append(("11", noisy_name(rng, t), noisy_description(rng, t), source_values(rng, t), [t["tinyId"]]))

    while count("m1") < nm1:
        remaining = nm1 - count("m1")
        size = remaining if remaining <= 3 else rng.choice([2, 2, 3, 4])
        if remaining - size == 1:
            size = remaining if remaining <= 4 else size - 1
        t = take()
        kind = rng.choice(["visit", "time"] + (["laterality"] if "NEI" in collections else []))
        variants = SPLITTERS[kind](t)[:size]
        for v in variants:
            base = noisy_name(rng, t) if rng.random() < 0.4 else t["name"]
            entries.append(("m1", v.replace(t["name"], base), noisy_description(rng, t), source_values(rng, t),
                            [t["tinyId"]]))

    while count("1m") < n1m:
        t = take()
        concept = concept_of(corpus, t).split("|")[0]
        siblings = [r for c, recs in corpus.by_concept.items() if c.split("|")[0] == concept for r in recs
                    if r["tinyId"] not in taken and r["collection"] in collections]
        if not siblings:
            taken.discard(t["tinyId"])
            pool.remove(t)
            continue
        extra = rng.sample(siblings, min(len(siblings), rng.choice([1, 1, 2])))
        for e in extra:
            taken.add(e["tinyId"])
        general = concept.split(":", 1)[1]
        entries.append(("1m", general, noisy_description(rng, t), source_values(rng, t),
                        [t["tinyId"]] + [e["tinyId"] for e in extra]))

    # source names must be unique within the dataset
    seen = {}
    unique = []
    for kind, src, desc, vals, targets in entries:
        key = src
        if key in seen:
            seen[key] += 1
            src = f"{src} {seen[key]}"
        else:
            seen[key] = 1
        unique.append((kind, src, desc, vals, targets))
    return unique


def concept_of(corpus, rec):
    for c, recs in corpus.by_concept.items():
        if any(r is rec for r in recs):
            return c
    raise KeyError(rec["tinyId"])


def r_domain(corpus, rec):
    return concept_of(corpus, rec).split(":", 1)[0]


DATASETS = [
    # name, collections, 1v1, Mv1, 1vM, domains, dictionary size
    ("Eye", ["NIH-Endorsed", "NEI"], 3, 13, 1, ["eye", "demo"], 40,
     [("m1", None, "Race", "NIH-Endorsed")]),
    ("Stroke", ["NIH-Endorsed", "NINDS"], 18, 2, 1, ["stroke", "demo"], 48,
     [("11", "Imaging Modality Type", "Imaging Modality Type", "NINDS")]),
    ("ADRD", ["NIH-Endorsed", "NINDS"], 70, 17, 16, ["adrd", "demo", "stroke"], None,
     [("11", "Evidence of Lewy body pathology", "Lewy body pathology indicator", "NINDS")]),
    ("COVID-19", ["NIH-Endorsed", "Project 5 (COVID-19)"], 21, 85, 17, ["covid", "demo"], 301,
     [("11", "Ethnicity", "Ethnicity", "Project 5 (COVID-19)")]),
]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def join_values(values):
    return "|".join(v.replace("\\", "\\\\").replace("|", "\\|") for v in values)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="fixtures")
    args = ap.parse_args()
    out = Path(args.out)
    (out / "dictionaries").mkdir(parents=True, exist_ok=True)

    rng = random.Random(SEED)
    corpus = build_corpus(rng)
    # Eye's "Race" pin needs the NIH-Endorsed record with race values.
    with open(out / "corpus.json", "w", encoding="utf-8") as f:
        json.dump(corpus.records, f, indent=1, ensure_ascii=False)
        f.write("\n")

    gold_rows = []
    manifest = []
    for name, colls, n11, nm1, n1m, domains, size, pinned in DATASETS:
        entries = make_dataset(rng, corpus, (name, colls, n11, nm1, n1m, domains), pinned)
        assert len(entries) == n11 + nm1 + n1m, (name, len(entries))
        for kind, src, desc, vals, targets in entries:
            gold_rows.append([name, src, desc, join_values(vals), ";".join(targets)])
        manifest.append((name, colls, size))
        if size is not None:
            fill = [u for u in UNMAPPABLE]
            rng.shuffle(fill)
            rows = [[src, desc, join_values(vals)] for _, src, desc, vals, _ in entries]
            i = 0
            while len(rows) < size:
                base = fill[i % len(fill)]
                label = base if i < len(fill) else f"{base} {i // len(fill) + 1}"
                rows.append([label, "", ""])
                i += 1
            rng.shuffle(rows)
            slug = name.lower().replace("-", "")
            write_csv(out / "dictionaries" / f"{slug}.csv", ["name", "description", "values"], rows)

    write_csv(out / "gold.csv",
              ["dataset", "source_name", "source_description", "source_values", "accepted_target_ids"], gold_rows)
    with open(out / "datasets.toml", "w", encoding="utf-8") as f:
        for name, colls, size in manifest:
            f.write("[[dataset]]\n")
            f.write(f"name = {json.dumps(name)}\n")
            f.write("collections = [" + ", ".join(json.dumps(c) for c in colls) + "]\n")
            if size is not None:
                f.write(f"total_elements = {size}\n")
            f.write("\n")
    print(f"{len(corpus.records)} CDEs, {len(gold_rows)} gold entries -> {out}")


if __name__ == "__main__":
    main()
