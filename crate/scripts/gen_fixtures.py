"""Generates the synthetic fixture corpora and task files under data/.

Every file is a pure function of the seed below, so rerunning the script
reproduces the committed bytes exactly.
"""

import json
import random
from pathlib import Path

SEED = 20240601
OUT = Path(__file__).resolve().parent.parent / "data"

EN_NOUNS = """river mountain village teacher farmer child market window garden letter
road city doctor student horse bridge winter summer morning evening house school
book story friend brother sister mother father forest field lake island ship
song kitchen table door wall stone tree flower bird dog cat fish road train
station library museum office hospital church street harbor valley castle king
queen soldier merchant sailor painter writer singer baker miller hunter shepherd""".split()
EN_ADJ = """old young small large quiet busy green cold warm bright dark long short
happy tired careful strange simple heavy gentle clever proud honest ancient
narrow wide empty crowded distant local golden silver wooden""".split()
EN_VERBS = [
    ("walked", "to"), ("looked", "at"), ("spoke", "to"), ("waited", "for"), ("returned", "to"),
    ("listened", "to"), ("worked", "in"), ("lived", "near"), ("stood", "by"), ("sat", "under"),
    ("ran", "across"), ("wrote", "about"), ("thought", "about"), ("arrived", "at"), ("slept", "in"),
]
EN_TRANS = """saw found built carried opened painted sold bought cleaned visited followed
remembered watched closed repaired described""".split()
EN_TIME = ["in the morning", "at night", "every day", "after the rain", "before the winter",
           "during the summer", "on the first day", "long ago", "that evening", "in the spring"]
EN_CONJ = ["and", "but", "because", "so", "while", "although"]
NAMES = ["Anna", "Tom", "Maria", "John", "Elena", "Peter", "Sara", "David", "Clara", "Paul"]


def en_np(r):
    n = r.choice(EN_NOUNS)
    if r.random() < 0.4:
        return f"the {r.choice(EN_ADJ)} {n}"
    return f"the {n}" if r.random() < 0.8 else f"a {n}"


def en_clause(r):
    subj = r.choice(NAMES) if r.random() < 0.3 else en_np(r)
    if r.random() < 0.5:
        v, p = r.choice(EN_VERBS)
        s = f"{subj} {v} {p} {en_np(r)}"
    else:
        s = f"{subj} {r.choice(EN_TRANS)} {en_np(r)}"
    if r.random() < 0.35:
        s += " " + r.choice(EN_TIME)
    return s


def en_sentence(r):
    s = en_clause(r)
    if r.random() < 0.3:
        s += f", {r.choice(EN_CONJ)} {en_clause(r)}"
    s = s[0].upper() + s[1:]
    return s + r.choice([".", ".", ".", "!", "?"] if r.random() < 0.1 else ["."])


# Common characters; the "words" below are fixed bigrams and trigrams of them.
CJK_CHARS = ("的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会"
             "自着去之过家学对可她里后小么心多天而能好都然没日于起还发成事只作当想看文无开手"
             "十用主行方又如前所本见经头面公同三已老从动两长知民样现分将外但身些与高意进把法此"
             "实回二理美点月明其种声全工己话儿者向情部正名定女问力机给等几很业最间新什打便位因"
             "重被走电四第门相次东政海口使教西再平真听世气信北少关并内加化由却代军产入先山五太"
             "水万市眼体别处总才场师书比住员九笑性通目华报立马命张活难神数件安表原车白应路期叫")
CJK_PUNCT = ["，", "。", "，", "。", "、", "！", "？"]


def cjk_lexicon(r):
    words = set()
    while len(words) < 600:
        k = r.choice([1, 2, 2, 2, 3])
        words.add("".join(r.choice(CJK_CHARS) for _ in range(k)))
    return sorted(words)


def cjk_sentence(r, lex, weights):
    n = r.randint(4, 12)
    out = []
    for i in range(n):
        out.append(r.choices(lex, weights)[0])
        if i < n - 1 and r.random() < 0.15:
            out.append("，")
    return "".join(out) + r.choice(["。", "。", "。", "！", "？"])


KK_STEMS = """үй мектеп бала ауыл қала өзен тау дала жол кітап мұғалім дәрігер оқушы
әке ана апа аға қыз ұл дос көл орман бақ есік терезе күн ай жұлдыз су нан
шай ет сүт ат қой сиыр түйе ит мысық құс балық адам халық ел жер тіл әнші
ақын жазушы дүкен базар көше пойыз вокзал кітапхана мұражай аурухана""".split()
KK_ADJ = """үлкен кішкентай жаңа ескі жақсы әдемі биік терең ұзын қысқа ақ қара
қызыл жасыл сары көк жылы суық таза тыныш ыстық ауыр жеңіл бай кедей""".split()
KK_VERBS = """барды келді көрді оқыды жазды тұрды отырды жүрді тыңдады сөйледі
ойлады күтті қайтты жұмыс_істеді ұйықтады әкелді ашты жапты салды сатты""".split()
KK_TIME = ["кеше", "бүгін", "ертең", "таңертең", "кешке", "жазда", "қыста", "көктемде",
           "күзде", "әр күні", "бір күні", "сол кезде"]
KK_NAMES = ["Айгүл", "Нұрлан", "Әсел", "Ерлан", "Дана", "Бауыржан", "Гүлнар", "Арман", "Мәди", "Сәуле"]
KK_CONJ = ["және", "бірақ", "себебі", "сондықтан", "ал"]

BACK = set("аоұыя")
FRONT = set("әөүіеэ")
VOICELESS = set("кқпстфхцчшщ")


def harmony(stem):
    for ch in reversed(stem):
        if ch in BACK:
            return "back"
        if ch in FRONT:
            return "front"
    return "back"


def kk_case(stem, case):
    h = harmony(stem)
    last = stem[-1]
    vowel_end = last in BACK | FRONT | set("иу")
    if case == "loc":
        base = "т" if last in VOICELESS else "д"
        return stem + base + ("а" if h == "back" else "е")
    if case == "dat":
        if vowel_end:
            return stem + ("ға" if h == "back" else "ге")
        return stem + (("қа" if h == "back" else "ке") if last in VOICELESS else ("ға" if h == "back" else "ге"))
    if case == "acc":
        if vowel_end:
            return stem + ("ны" if h == "back" else "ні")
        return stem + (("ты" if h == "back" else "ті") if last in VOICELESS else ("ды" if h == "back" else "ді"))
    if case == "gen":
        if vowel_end:
            return stem + ("ның" if h == "back" else "нің")
        return stem + (("тың" if h == "back" else "тің") if last in VOICELESS else ("дың" if h == "back" else "дің"))
    if case == "pl":
        if vowel_end:
            return stem + ("лар" if h == "back" else "лер")
        return stem + (("тар" if h == "back" else "тер") if last in VOICELESS else ("дар" if h == "back" else "дер"))
    return stem


def kk_np(r, case=None):
    stem = r.choice(KK_STEMS)
    if r.random() < 0.25:
        stem = kk_case(stem, "pl")
    w = kk_case(stem, case) if case else stem
    if r.random() < 0.4:
        w = f"{r.choice(KK_ADJ)} {w}"
    return w


def kk_clause(r):
    subj = r.choice(KK_NAMES) if r.random() < 0.3 else kk_np(r)
    parts = [subj]
    if r.random() < 0.35:
        parts.append(r.choice(KK_TIME))
    if r.random() < 0.3:
        parts.append(f"{kk_np(r, 'gen')} {kk_np(r)}")
    parts.append(kk_np(r, r.choice(["loc", "dat", "acc"])))
    parts.append(r.choice(KK_VERBS).replace("_", " "))
    return " ".join(parts)


def kk_sentence(r):
    s = kk_clause(r)
    if r.random() < 0.3:
        s += f", {r.choice(KK_CONJ)} {kk_clause(r)}"
    return s[0].upper() + s[1:] + r.choice([".", ".", ".", ".", "!", "?"])


def document(r, sentence, target):
    out = []
    size = 0
    while size < target:
        s = sentence(r)
        out.append(s)
        size += len(s.encode()) + 1
    return " ".join(out)


def corpus(r, sentence, n_docs, lo, hi):
    return [document(r, sentence, r.randint(lo, hi)) for _ in range(n_docs)]


def cloze_items(r, sentence, pool, n):
    items = []
    for _ in range(n):
        s = sentence(r)
        words = s.rstrip(".!?").split(" ")
        if len(words) < 4:
            continue
        k = r.randint(2, len(words) - 1)
        prompt = " ".join(words[:k])
        gold = " " + words[k]
        choices = [gold]
        while len(choices) < 4:
            c = " " + r.choice(pool)
            if c not in choices:
                choices.append(c)
        r.shuffle(choices)
        items.append({"prompt": prompt, "choices": choices, "gold": choices.index(gold)})
    return items


def write_plain(path, docs):
    path.write_text("\n\n".join(docs) + "\n", encoding="utf-8")


def write_jsonl(path, rows):
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def main():
    r = random.Random(SEED)
    OUT.mkdir(parents=True, exist_ok=True)
    lex = cjk_lexicon(r)
    weights = [1.0 / (i + 1) for i in range(len(lex))]

    english = corpus(r, en_sentence, 380, 800, 2000)
    chinese = corpus(r, lambda q: cjk_sentence(q, lex, weights), 60, 600, 1500)
    mixed = english + chinese
    r.shuffle(mixed)
    write_plain(OUT / "stage_a.txt", mixed)

    kazakh = corpus(r, kk_sentence, 300, 800, 2000)
    write_jsonl(OUT / "stage_b.jsonl", [{"id": i, "text": t} for i, t in enumerate(kazakh)])

    en_pool = EN_NOUNS + EN_ADJ + EN_TRANS + [v for v, _ in EN_VERBS]
    kk_pool = KK_STEMS + KK_ADJ + [v.replace("_", " ") for v in KK_VERBS]
    write_jsonl(OUT / "tasks_en_cloze.jsonl", cloze_items(r, en_sentence, en_pool, 100))
    write_jsonl(OUT / "tasks_kk_cloze.jsonl", cloze_items(r, kk_sentence, kk_pool, 100))


if __name__ == "__main__":
    main()
