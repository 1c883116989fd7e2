#!/usr/bin/env python3
"""Generate the bundled desk-scale corpora under data/.

Paragraphs are produced by a small seeded grammar per language, one per
line. Output is deterministic for a given seed.

    python3 tools/make_corpora.py [--out data] [--seed 2017]
"""

import argparse
import random
from pathlib import Path

TRAIN_PARAGRAPHS = 1000
TEST_PARAGRAPHS = 200

EN = {
    "subject": [
        "the old miller", "a young doctor", "the city council", "my neighbour", "the river",
        "a quiet student", "the northern wind", "our teacher", "the small village", "a travelling merchant",
        "the committee", "the orchestra", "her grandmother", "the harbour master", "a tired farmer",
        "the library", "the new bridge", "a group of children", "the local newspaper", "the mountain road",
    ],
    "verb": [
        "crossed", "described", "repaired", "followed", "remembered", "painted", "opened", "visited",
        "measured", "carried", "questioned", "ignored", "welcomed", "studied", "finished", "discovered",
    ],
    "object": [
        "the wooden gate", "a long letter", "the winter market", "an empty field", "the stone tower",
        "a forgotten song", "the railway station", "the broken clock", "a map of the coast", "the spring harvest",
        "the annual report", "a narrow street", "the public garden", "an unusual machine", "the evening train",
    ],
    "adverb": ["slowly", "carefully", "again", "without a word", "before dawn", "in silence", "with great care", "twice"],
    "place": [
        "near the market", "in the valley", "along the coast", "behind the church", "at the edge of town",
        "under the old bridge", "across the square", "in the north", "beside the lake", "during the storm",
    ],
    "clause": [
        "because the weather had changed", "although nobody had asked", "while the bells were ringing",
        "after the meeting ended", "when the lights went out", "since the road was closed",
        "as the season turned", "before anyone noticed",
    ],
    "year": [str(y) for y in range(1820, 2016, 7)],
}


def en_sentence(r):
    kind = r.randrange(5)
    s, v, o = r.choice(EN["subject"]), r.choice(EN["verb"]), r.choice(EN["object"])
    if kind == 0:
        out = f"{s} {v} {o}"
    elif kind == 1:
        out = f"{s} {v} {o} {r.choice(EN['place'])}"
    elif kind == 2:
        out = f"{s} {r.choice(EN['adverb'])} {v} {o}, {r.choice(EN['clause'])}"
    elif kind == 3:
        out = f"in {r.choice(EN['year'])}, {s} {v} {o} {r.choice(EN['place'])}"
    else:
        out = f"{s} {v} {o} and {r.choice(EN['subject'])} {r.choice(EN['verb'])} {r.choice(EN['object'])}"
    return out[0].upper() + out[1:] + "."


ZH = {
    "subject": ["老师", "这个城市", "我的朋友", "一位医生", "村里的孩子", "那条河", "市政府", "图书馆", "年轻的工程师", "他的祖父", "新闻记者", "这家工厂"],
    "verb": ["修好了", "参观了", "描述了", "打开了", "记得", "发现了", "研究了", "完成了", "带来了", "欢迎了", "测量了", "整理了"],
    "object": ["那座老桥", "一封长信", "冬天的市场", "空旷的田野", "古老的石塔", "一首歌", "火车站", "坏掉的钟", "海岸地图", "春天的收成", "年度报告", "公共花园"],
    "place": ["在山谷里", "在河边", "在城市北部", "在广场上", "在湖边", "在暴风雨中", "在学校门口", "在小镇边上"],
    "time": ["昨天", "去年", "早上", "那天晚上", "上个月", "很多年前", "冬天", "周末"],
    "clause": ["因为天气变了", "虽然没有人问", "当钟声响起的时候", "会议结束以后", "因为道路关闭了", "在大家注意到之前"],
}


def zh_sentence(r):
    kind = r.randrange(4)
    s, v, o = r.choice(ZH["subject"]), r.choice(ZH["verb"]), r.choice(ZH["object"])
    if kind == 0:
        return f"{s}{v}{o}。"
    if kind == 1:
        return f"{r.choice(ZH['time'])}，{s}{r.choice(ZH['place'])}{v}{o}。"
    if kind == 2:
        return f"{r.choice(ZH['clause'])}，{s}{v}{o}。"
    return f"{s}{v}{o}，{r.choice(ZH['subject'])}{r.choice(ZH['verb'])}{r.choice(ZH['object'])}。"


AR = {
    "subject": ["المعلم", "الطبيب الشاب", "مجلس المدينة", "جاري", "النهر", "الطالب الهادئ", "الفلاح", "المكتبة", "الصحفي", "جدته", "التاجر", "الأطفال"],
    "verb": ["زار", "وصف", "أصلح", "فتح", "تذكر", "درس", "اكتشف", "أنهى", "حمل", "رحب ب", "قاس", "رسم"],
    "object": ["الجسر القديم", "رسالة طويلة", "سوق الشتاء", "الحقل الفارغ", "البرج الحجري", "أغنية منسية", "محطة القطار", "الساعة المكسورة", "خريطة الساحل", "الحديقة العامة", "التقرير السنوي"],
    "place": ["في الوادي", "على الساحل", "قرب السوق", "في شمال المدينة", "بجانب البحيرة", "أثناء العاصفة", "في الساحة"],
    "time": ["أمس", "في العام الماضي", "في الصباح", "تلك الليلة", "منذ سنوات", "في الشتاء"],
    "clause": ["لأن الطقس تغير", "مع أن أحدا لم يسأل", "بعد انتهاء الاجتماع", "عندما انطفأت الأنوار", "لأن الطريق كان مغلقا"],
}


def ar_sentence(r):
    kind = r.randrange(4)
    s, v, o = r.choice(AR["subject"]), r.choice(AR["verb"]), r.choice(AR["object"])
    if kind == 0:
        return f"{v} {s} {o}."
    if kind == 1:
        return f"{r.choice(AR['time'])} {v} {s} {o} {r.choice(AR['place'])}."
    if kind == 2:
        return f"{v} {s} {o} {r.choice(AR['clause'])}."
    return f"{v} {s} {o}، و{r.choice(AR['verb'])} {r.choice(AR['subject'])} {r.choice(AR['object'])}."


def paragraph(r, sentence, sep):
    # Skewed toward short paragraphs with a tail up to roughly 1 KB.
    count = min(1 + int(r.expovariate(1 / 3.0)), 14)
    return sep.join(sentence(r) for _ in range(count))


def generate(r, sentence, sep, n):
    return [paragraph(r, sentence, sep) for _ in range(n)]


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--seed", type=int, default=2017)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    langs = [("english", en_sentence, " "), ("chinese", zh_sentence, ""), ("arabic", ar_sentence, " ")]
    combined = []
    for i, (name, sentence, sep) in enumerate(langs):
        r = random.Random(args.seed * 31 + i)
        train = generate(r, sentence, sep, TRAIN_PARAGRAPHS)
        test = generate(r, sentence, sep, TEST_PARAGRAPHS)
        write(out / f"{name}.train.txt", train)
        write(out / f"{name}.test.txt", test)
        combined.extend(train)
    random.Random(args.seed).shuffle(combined)
    write(out / "multilingual.train.txt", combined)


if __name__ == "__main__":
    main()
