"""Prompt templates for extracting causal maps with an assistant model.

Each template is a task description, one handwritten demonstration with its
expected JSON output, and a closing directive. The record to annotate goes
last.
"""

from __future__ import annotations

from dataclasses import dataclass

_MATH_TASK: str = (
    "You need to evaluate the causal importance relationships between tokens in text data from the field of mathematical reasoning. "
    "Among them, entities, values, and keywords containing operation symbols are crucial for numerical reasoning. "
    "The data is used to train autoregressive models, so tokens that appear later can only see the tokens that come before them. "
    "Please output the important tokens for executing mathematical reasoning tasks during training, along with the tokens they "
    "should focus on from the preceding context as causal associations (which can be more than one). "
    'Present the output JSON string in a dict format, such as {"A":[...],"B":[...],...}. '
    "You should only output JSON without other contents. Note that the Answer part is considered important and must be analyzed."
)


@dataclass(frozen=True)
class PromptTemplate:
    """Task description, demonstration and output directive."""

    name: str
    task: str
    demo: str
    demo_output: str
    directive: str

    @property
    def demonstrations(self) -> str:
        return f"##demo\n\n{self.demo}\n\n##output\n\n{self.demo_output}"


SVAMP = PromptTemplate(
    name="svamp",
    task=_MATH_TASK,
    demo=(
        "If they are already at 659 feet and the cave is 762 feet deep. "
        "How much farther until they reach the end of the cave? Answer: 103.0"
    ),
    demo_output=(
        "{\n"
        '"762 feet deep":["the cave"],\n'
        '"until":["How much farther"],\n'
        '"Answer":["659 feet","762 feet", "until", "end of the cave"],\n'
        '"103.0":["659 feet", "and", "762 feet", "Answer"]\n'
        "}"
    ),
    directive=(
        "##Please output following sentence importance between tokens. The final answer at the end and the corresponding "
        "number's importance must always be analyzed (such as 103.0 shown above)."
    ),
)

ARC_E = PromptTemplate(
    name="arc_e",
    task=(
        "You need to evaluate the causal importance relationships between tokens in text data from the field of reasoning. "
        "You only need to consider the tokens that have the greatest impact on the final answer. "
        "The data is used to train autoregressive models, so tokens that appear later can only see the tokens that come before them. "
        "Please output the important tokens for executing reasoning tasks during training, along with the tokens they should focus on "
        "from the preceding context as causal associations (which can be more than one). "
        'Present the output JSON string in a dict format, such as {"A":[...],"B":[...],...}. '
        "Note that the Answer part is considered important and must be analyzed.\n"
        "Below I will give you a single-choice question. You need to analyze the most important part of each option for the answer, "
        "and together with the answer, form the causal relationship that needs to be considered to generate the answer. "
        "Note that only the token behind can notice the previous word, and keep the autoregressive characteristics, "
        'such as "option content": "option A/B/C/D". The specific example is as follows:'
    ),
    demo=(
        "Which factor will most likely cause a person to develop a fever?\n\n"
        "A. a leg muscle relaxing after exercise\n\n"
        "B. a bacterial population in the bloodstream\n\n"
        "C. several viral particles on the skin\n\n"
        "D. carbohydrates being digested in the stomach\n\n"
        "Answer: B"
    ),
    demo_output=(
        "{\n"
        '"develop a fever":["factor","cause"],\n'
        '"leg muscle relaxing":["A."],\n'
        '"bacterial population":["B."],\n'
        '"viral particles":["C."],\n'
        '"digested in the stomach":["D."],\n'
        '"Answer: B":["A.", "leg muscle relaxing", "B.","bacterial population", "C.","viral particles", "D.",  "digested in the stomach"]\n'
        "}"
    ),
    directive=(
        "##Please output following sentence importance between tokens. The final answer at the end and the corresponding "
        "number's importance must always be analyzed (such as Answer: B shown above). "
        "You should only output JSON string without other contents."
    ),
)

GSM8K = PromptTemplate(
    name="gsm8k",
    task=_MATH_TASK,
    demo=(
        "Natalia sold clips to 48 of her friends in April, and then she sold half as many clips in May. "
        "How many clips did Natalia sell altogether in April and May? "
        "Answer: Natalia sold 48/2 = <<48/2=24>>24 clips in May. "
        "Natalia sold 48+24 = <<48+24=72>>72 clips altogether in April and May.#### 72"
    ),
    demo_output=(
        "{\n"
        '"in April":["48"],\n'
        '"in May": ["half as many clips", "48/2 = <<48/2=24>>24 clips", "48"],\n'
        '"72 clips": ["How many clips", "sell altogether", "48+24", "in April", "in May"],\n'
        '"#### 72":["How many clips","in April and May","48+24","72 clips"]\n'
        "}"
    ),
    directive=(
        "##Please output following sentence importance between tokens. The final answer at the end and the corresponding "
        "number's importance must always be analyzed (such as #### 72 shown above). "
        "Please try to use the most refined causal characteristics to summarize the causal process of the answer"
    ),
)

MAWPS = PromptTemplate(
    name="mawps",
    task=_MATH_TASK,
    demo="William has 2 bottle caps. He buys 41 more. How many bottle caps does William have in all? Answer: 43.0",
    demo_output=(
        "{\n"
        '"2 bottle caps": ["William"],\n'
        '"41 more": ["He buys"],\n'
        '"William have": ["How many bottle caps"],\n'
        '"Answer": ["How many bottle caps"],\n'
        '"43.0": ["2 bottle caps", "41 more"]\n'
        "}"
    ),
    directive=(
        "##Please output following sentence importance between tokens. The final answer at the end and the corresponding "
        "number's importance must always be analyzed (such as 43.0 shown above)."
    ),
)

STG = PromptTemplate(
    name="stg",
    task=(
        "You need to evaluate the causal importance relationships between tokens in statistical records used for risk prediction. "
        "Only some of the listed factors determine the answer; others merely correlate with them or are unrelated. "
        "The data is used to train autoregressive models, so tokens that appear later can only see the tokens that come before them. "
        "Please output the answer together with the factor entries it is caused by, written exactly as they appear in the record. "
        'Present the output JSON string in a dict format, such as {"A":[...],"B":[...],...}. '
        "You should only output JSON without other contents. Note that the Answer part is considered important and must be analyzed."
    ),
    demo=(
        "Here is the statistical data for a person. Please predict the probability of cancer.\n"
        "Yellow fingers: 3, Weight: 1, Room size: 4, Certain gene: 4, Clothing size: 1, Smoking: 2, Hormones: 2, Exercise: 5\n"
        "Here is the statistical data for a person. Please predict the probability of cancer. Answer: Low Risk"
    ),
    demo_output='{\n"Low Risk": ["Smoking: 2", "Weight: 1", "Exercise: 5"]\n}',
    directive=(
        "##Please output following sentence importance between tokens. The final answer at the end must always be analyzed "
        "(such as Low Risk shown above)."
    ),
)

TEMPLATES: dict[str, PromptTemplate] = {template.name: template for template in (SVAMP, ARC_E, GSM8K, MAWPS, STG)}
