class ColoredText:
    """
    用于更改输出到控制台的颜色
    使用方法：
        from src.Tools.util.Colorful_Console import ColoredText as CT
        print(CT("你要变蓝的文字").blue())
    """
    RED = '\033[91m'
    YELLOW = '\033[93m'
    BLUE = '\033[94m'
    GREEN = '\033[92m'
    PINK = '\033[95m'
    END = '\033[0m'

    def __init__(self, text):
        self.text = str(text)

    def _wrap(self, color):
        return f"{color}{self.text}{self.END}"

    def red(self):
        return self._wrap(self.RED)

    def yellow(self):
        return self._wrap(self.YELLOW)

    def blue(self):
        return self._wrap(self.BLUE)

    def green(self):
        return self._wrap(self.GREEN)

    def pink(self):
        return self._wrap(self.PINK)


def print_step(text, verbose=True):
    """打印步骤标题"""
    if verbose:
        print(ColoredText(text).blue())


def print_ok(text, verbose=True):
    if verbose:
        print(ColoredText(f"✓ {text}").green())


def print_warn(text, verbose=True):
    # 警告无论 verbose 与否都要进入证书，这里只负责显示
    if verbose:
        print(ColoredText(f"⚠ {text}").yellow())


def print_fail(text, verbose=True):
    if verbose:
        print(ColoredText(f"✗ {text}").red())
